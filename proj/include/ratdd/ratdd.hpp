// Copyright (c) 2026 The ratdd Authors
// SPDX-License-Identifier: Apache-2.0

// Umbrella header.

#pragma once

#include "ratdd/autodiff.hpp"
#include "ratdd/boosting.hpp"
#include "ratdd/commands.hpp"
#include "ratdd/config.hpp"
#include "ratdd/data.hpp"
#include "ratdd/distilled.hpp"
#include "ratdd/driver.hpp"
#include "ratdd/errors.hpp"
#include "ratdd/estimators.hpp"
#include "ratdd/evaluation.hpp"
#include "ratdd/finite_diff.hpp"
#include "ratdd/hardness.hpp"
#include "ratdd/inner_optim.hpp"
#include "ratdd/models.hpp"
#include "ratdd/rng.hpp"
#include "ratdd/tensor.hpp"
#include "ratdd/training.hpp"
