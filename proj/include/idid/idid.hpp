#pragma once

#include "idid/basis.hpp"
#include "idid/bootstrap.hpp"
#include "idid/data.hpp"
#include "idid/error.hpp"
#include "idid/estimate.hpp"
#include "idid/nuisance.hpp"
#include "idid/numerics.hpp"
#include "idid/panel_nocov.hpp"
#include "idid/panel_nonparam.hpp"
#include "idid/panel_param.hpp"
#include "idid/parallel.hpp"
#include "idid/repeated_cs.hpp"
#include "idid/report.hpp"
#include "idid/rng.hpp"
#include "idid/simulation.hpp"
#include "idid/version.hpp"
