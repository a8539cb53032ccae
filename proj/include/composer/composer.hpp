#pragma once

#include "composer/alloc.hpp"
#include "composer/rng.hpp"
#include "composer/tensor.hpp"
#include "composer/tape.hpp"
#include "composer/ops.hpp"
#include "composer/adamw.hpp"
#include "composer/finite_diff.hpp"
#include "composer/linalg.hpp"
#include "composer/util.hpp"
#include "composer/composition.hpp"
#include "composer/schedule.hpp"
#include "composer/denoiser.hpp"
#include "composer/layout.hpp"
#include "composer/generator.hpp"
#include "composer/dataset.hpp"
#include "composer/train.hpp"
#include "composer/quant.hpp"
#include "composer/config.hpp"
#include "composer/bench.hpp"
#include "composer/checkpoint.hpp"
#include "composer/metrics.hpp"
#include "composer/image_io.hpp"
