#pragma once

#include "mhthfa/errors.hpp"
#include "mhthfa/estep.hpp"
#include "mhthfa/fit.hpp"
#include "mhthfa/gig.hpp"
#include "mhthfa/hthfa.hpp"
#include "mhthfa/hyperbolic.hpp"
#include "mhthfa/io.hpp"
#include "mhthfa/metrics.hpp"
#include "mhthfa/quadrature.hpp"
#include "mhthfa/special_math.hpp"
#include "mhthfa/types.hpp"
