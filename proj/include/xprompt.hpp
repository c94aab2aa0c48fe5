#pragma once

// Umbrella header.

#include "xprompt/checkpoint.hpp"
#include "xprompt/dataset_io.hpp"
#include "xprompt/decode.hpp"
#include "xprompt/error.hpp"
#include "xprompt/eval.hpp"
#include "xprompt/experiment.hpp"
#include "xprompt/layout.hpp"
#include "xprompt/mask.hpp"
#include "xprompt/model.hpp"
#include "xprompt/optim.hpp"
#include "xprompt/raie.hpp"
#include "xprompt/rng.hpp"
#include "xprompt/task_example.hpp"
#include "xprompt/task_suite.hpp"
#include "xprompt/train.hpp"
#include "xprompt/vocab.hpp"
