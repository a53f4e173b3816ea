#pragma once

#include "objembed/attributes.hpp"
#include "objembed/config.hpp"
#include "objembed/encoder.hpp"
#include "objembed/error.hpp"
#include "objembed/evalkit.hpp"
#include "objembed/geometry.hpp"
#include "objembed/inputs.hpp"
#include "objembed/io.hpp"
#include "objembed/layout.hpp"
#include "objembed/model.hpp"
#include "objembed/objectives.hpp"
#include "objembed/parallel.hpp"
#include "objembed/params.hpp"
#include "objembed/rng.hpp"
#include "objembed/scenegen.hpp"
#include "objembed/trainer.hpp"
