#pragma once

#include "flowstream/core.hpp"
#include "flowstream/envsim.hpp"
#include "flowstream/experiment.hpp"
#include "flowstream/flowmatch.hpp"
#include "flowstream/metrics.hpp"
#include "flowstream/normkit.hpp"
#include "flowstream/saliency.hpp"
#include "flowstream/streamexec.hpp"
#include "flowstream/trainer.hpp"
#include "flowstream/velocitynet.hpp"
