#pragma once

// Convenience umbrella for the whole library.

#include "continual/checkpoint.hpp"
#include "continual/common.hpp"
#include "continual/data.hpp"
#include "continual/fisher.hpp"
#include "continual/harness.hpp"
#include "continual/importance.hpp"
#include "continual/memory.hpp"
#include "continual/metrics.hpp"
#include "continual/nn.hpp"
#include "continual/optim.hpp"
#include "continual/regularizers.hpp"
#include "continual/rng.hpp"
