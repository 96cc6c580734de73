#pragma once

#include "lve/common.hpp"
#include "lve/engine.hpp"
#include "lve/interp.hpp"
#include "lve/loopvertex.hpp"
#include "lve/model.hpp"
#include "lve/oracle.hpp"
#include "lve/parallel.hpp"
#include "lve/quadrature.hpp"
#include "lve/trees.hpp"
