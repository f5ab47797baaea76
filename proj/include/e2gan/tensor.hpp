#pragma once

#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "e2gan/errors.hpp"
#include "e2gan/random.hpp"

namespace e2gan {

// Dense row-major tensor of rank <= 4. Value semantics throughout; all
// model math runs on these via the autograd ops.
template <typename T>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int64_t> shape) : shape_(std::move(shape)) {
        data_.assign(static_cast<size_t>(numel_of(shape_)), T(0));
    }

    Tensor(std::vector<int64_t> shape, std::vector<T> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (static_cast<int64_t>(data_.size()) != numel_of(shape_))
            throw ShapeError("tensor data size does not match shape " + shape_str());
    }

    static Tensor zeros(std::vector<int64_t> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<int64_t> shape, T value) {
        Tensor t(std::move(shape));
        for (auto& v : t.data_) v = value;
        return t;
    }

    static Tensor randn(std::vector<int64_t> shape, RandomEngine& rng, T mean = T(0),
                        T stddev = T(1)) {
        Tensor t(std::move(shape));
        for (auto& v : t.data_) v = static_cast<T>(rng.normal(mean, stddev));
        return t;
    }

    const std::vector<int64_t>& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int64_t dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    int64_t numel() const { return static_cast<int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::vector<T>& vec() { return data_; }
    const std::vector<T>& vec() const { return data_; }

    T& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    const T& operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    // Indexed accessors for the common ranks; callers guarantee bounds.
    T& at2(int64_t a, int64_t b) { return data_[static_cast<size_t>(a * shape_[1] + b)]; }
    const T& at2(int64_t a, int64_t b) const {
        return data_[static_cast<size_t>(a * shape_[1] + b)];
    }
    T& at3(int64_t a, int64_t b, int64_t c) {
        return data_[static_cast<size_t>((a * shape_[1] + b) * shape_[2] + c)];
    }
    const T& at3(int64_t a, int64_t b, int64_t c) const {
        return data_[static_cast<size_t>((a * shape_[1] + b) * shape_[2] + c)];
    }
    T& at4(int64_t a, int64_t b, int64_t c, int64_t d) {
        return data_[static_cast<size_t>(((a * shape_[1] + b) * shape_[2] + c) * shape_[3] + d)];
    }
    const T& at4(int64_t a, int64_t b, int64_t c, int64_t d) const {
        return data_[static_cast<size_t>(((a * shape_[1] + b) * shape_[2] + c) * shape_[3] + d)];
    }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    std::string shape_str() const {
        std::ostringstream os;
        os << '[';
        for (size_t i = 0; i < shape_.size(); ++i) os << (i ? "," : "") << shape_[i];
        os << ']';
        return os.str();
    }

    Tensor<T> reshaped(std::vector<int64_t> shape) const {
        if (numel_of(shape) != numel())
            throw ShapeError("reshape from " + shape_str() + " changes element count");
        Tensor t;
        t.shape_ = std::move(shape);
        t.data_ = data_;
        return t;
    }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> t(shape_);
        for (int64_t i = 0; i < numel(); ++i) t[i] = static_cast<U>(data_[static_cast<size_t>(i)]);
        return t;
    }

    static int64_t numel_of(const std::vector<int64_t>& shape) {
        int64_t n = 1;
        for (int64_t d : shape) n *= d;
        return n;
    }

private:
    std::vector<int64_t> shape_;
    std::vector<T> data_;
};

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
    if (!a.same_shape(b))
        throw ShapeError(std::string(what) + ": expected " + a.shape_str() + ", got " +
                         b.shape_str());
}

template <typename T>
uint64_t tensor_checksum(const Tensor<T>& t) {
    return fnv1a64(t.data(), static_cast<size_t>(t.numel()) * sizeof(T));
}

}  // namespace e2gan
