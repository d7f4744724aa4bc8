// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "spikediff/common.hpp"
#include "spikediff/sparse.hpp"
#include "spikediff/autodiff.hpp"
#include "spikediff/surrogate.hpp"
#include "spikediff/dynamics.hpp"
#include "spikediff/fitting/lbfgsb.hpp"
#include "spikediff/fitting/losses.hpp"
#include "spikediff/fitting/metaheuristics.hpp"
#include "spikediff/fitting/multistart.hpp"
#include "spikediff/fitting/recording.hpp"
#include "spikediff/network.hpp"
#include "spikediff/training.hpp"
#include "spikediff/bench.hpp"
#include "spikediff/config.hpp"
#include "spikediff/checkpoint.hpp"
