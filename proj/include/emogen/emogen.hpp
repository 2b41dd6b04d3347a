#pragma once

#include "emogen/artifacts.hpp"
#include "emogen/checkpoint.hpp"
#include "emogen/corpus.hpp"
#include "emogen/decoding.hpp"
#include "emogen/emotion.hpp"
#include "emogen/errors.hpp"
#include "emogen/evaluation.hpp"
#include "emogen/model.hpp"
#include "emogen/optimizer.hpp"
#include "emogen/random.hpp"
#include "emogen/service.hpp"
#include "emogen/synthetic.hpp"
#include "emogen/tokenizer.hpp"
#include "emogen/training.hpp"

namespace emogen {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace emogen
