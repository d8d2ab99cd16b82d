#pragma once

#include "lomoe/checkpoint.hpp"
#include "lomoe/commands.hpp"
#include "lomoe/config.hpp"
#include "lomoe/continual.hpp"
#include "lomoe/dataio.hpp"
#include "lomoe/datasynth.hpp"
#include "lomoe/errors.hpp"
#include "lomoe/gating.hpp"
#include "lomoe/lora.hpp"
#include "lomoe/metrics.hpp"
#include "lomoe/model.hpp"
#include "lomoe/optim.hpp"
#include "lomoe/rng.hpp"
#include "lomoe/tensor.hpp"
#include "lomoe/threading.hpp"
