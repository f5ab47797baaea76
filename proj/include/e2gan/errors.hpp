#pragma once

#include <stdexcept>
#include <string>

namespace e2gan {

// Invalid configuration (bad field values, violated invariants).
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Tensor shape mismatch; message reports expected vs actual.
struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Filesystem / parsing failures; message names the offending path.
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Checkpoint corruption or version mismatch.
struct IntegrityError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// LoRA injection with a rank spec that does not match the crucial-layer set.
struct InjectionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Rank-search abort (scorer failure etc.), carries round context.
struct SearchError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// External embedding adapter unreachable or misbehaving.
struct EmbedderError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Training diverged (non-finite loss) or was misconfigured.
struct TrainError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace e2gan
