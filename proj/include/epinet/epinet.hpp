#pragma once

#include "checkpoint.hpp"
#include "config.hpp"
#include "data.hpp"
#include "epitome.hpp"
#include "errors.hpp"
#include "export.hpp"
#include "gradcheck.hpp"
#include "gradsuite.hpp"
#include "layers.hpp"
#include "network.hpp"
#include "optim.hpp"
#include "rng.hpp"
#include "tensor.hpp"
#include "topographic.hpp"
#include "trainer.hpp"
