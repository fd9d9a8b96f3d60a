#pragma once

#include "mdprune/archive.hpp"
#include "mdprune/autodiff.hpp"
#include "mdprune/corpus.hpp"
#include "mdprune/diagnostics.hpp"
#include "mdprune/harness.hpp"
#include "mdprune/mask.hpp"
#include "mdprune/mirror_opt.hpp"
#include "mdprune/model.hpp"
#include "mdprune/random.hpp"
#include "mdprune/saliency.hpp"
#include "mdprune/tensor.hpp"
