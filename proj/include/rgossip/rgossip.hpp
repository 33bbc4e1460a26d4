#pragma once

#include "rgossip/errors.hpp"
#include "rgossip/manifold.hpp"
#include "rgossip/problems.hpp"
#include "rgossip/gossip.hpp"
#include "rgossip/data.hpp"
#include "rgossip/metrics.hpp"
