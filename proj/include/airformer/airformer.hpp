// Umbrella header.
#pragma once

#include "airformer/tensor.hpp"
#include "airformer/ops.hpp"
#include "airformer/nn.hpp"
#include "airformer/grad_check.hpp"
#include "airformer/dartboard.hpp"
#include "airformer/attention.hpp"
#include "airformer/stochastic.hpp"
#include "airformer/model.hpp"
#include "airformer/data.hpp"
#include "airformer/metrics.hpp"
#include "airformer/trainer.hpp"
