// Copyright 2026 The sipl-kit Authors.
// SPDX-License-Identifier: Apache-2.0

// Umbrella header.

#pragma once

#include "siplkit/autodiff.hpp"
#include "siplkit/backbone.hpp"
#include "siplkit/config.hpp"
#include "siplkit/corpus.hpp"
#include "siplkit/degrade.hpp"
#include "siplkit/error.hpp"
#include "siplkit/evalkit.hpp"
#include "siplkit/gradcheck.hpp"
#include "siplkit/harness.hpp"
#include "siplkit/hash.hpp"
#include "siplkit/image.hpp"
#include "siplkit/metrics.hpp"
#include "siplkit/ops.hpp"
#include "siplkit/privfusion.hpp"
#include "siplkit/restore.hpp"
#include "siplkit/rng.hpp"
#include "siplkit/tensor.hpp"
#include "siplkit/train.hpp"
