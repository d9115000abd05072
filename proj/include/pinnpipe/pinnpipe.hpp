#pragma once

// Umbrella header.

#include "pinnpipe/error.hpp"
#include "pinnpipe/expr.hpp"
#include "pinnpipe/parser.hpp"
#include "pinnpipe/canonical.hpp"
#include "pinnpipe/match.hpp"
#include "pinnpipe/pde.hpp"
#include "pinnpipe/semantic.hpp"
#include "pinnpipe/provider.hpp"
#include "pinnpipe/pde_agent.hpp"
#include "pinnpipe/pinn_agent.hpp"
#include "pinnpipe/trainer.hpp"
#include "pinnpipe/code_agent.hpp"
#include "pinnpipe/feedback.hpp"
#include "pinnpipe/subprocess.hpp"
#include "pinnpipe/config.hpp"
#include "pinnpipe/orchestrator.hpp"
#include "pinnpipe/fixtures.hpp"
#include "pinnpipe/bench.hpp"
// Last: httplib pulls in <resolv.h>, whose _res macro breaks Eigen headers.
#include "pinnpipe/http.hpp"
