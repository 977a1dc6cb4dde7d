#pragma once

#include "gspt/checkpoint.hpp"
#include "gspt/config.hpp"
#include "gspt/dataset.hpp"
#include "gspt/error.hpp"
#include "gspt/experiment.hpp"
#include "gspt/graph.hpp"
#include "gspt/icl.hpp"
#include "gspt/linkpred.hpp"
#include "gspt/node_objective.hpp"
#include "gspt/optimizer.hpp"
#include "gspt/parallel.hpp"
#include "gspt/partition.hpp"
#include "gspt/pretrain.hpp"
#include "gspt/rng.hpp"
#include "gspt/sequencer.hpp"
#include "gspt/synth.hpp"
#include "gspt/transformer.hpp"
#include "gspt/walker.hpp"
