#pragma once

// Umbrella header: the whole library in one include.

#include "pim/vec.hpp"
#include "pim/sexpr.hpp"
#include "pim/trace.hpp"
#include "pim/kdtree.hpp"
#include "pim/machine.hpp"
#include "pim/autodiff.hpp"
#include "pim/optimizer.hpp"
#include "pim/search.hpp"
#include "pim/domains.hpp"
#include "pim/config.hpp"
#include "pim/report.hpp"
