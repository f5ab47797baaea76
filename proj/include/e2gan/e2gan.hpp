#pragma once

#include "e2gan/config.hpp"
#include "e2gan/dataio.hpp"
#include "e2gan/lora.hpp"
#include "e2gan/metrics.hpp"
#include "e2gan/model.hpp"
#include "e2gan/rank_search.hpp"
#include "e2gan/selection.hpp"
#include "e2gan/trainer.hpp"
