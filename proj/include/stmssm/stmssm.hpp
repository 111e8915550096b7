#pragma once

#include "stmssm/commands.hpp"
#include "stmssm/csv.hpp"
#include "stmssm/flops.hpp"
#include "stmssm/forward_stack.hpp"
#include "stmssm/loss_analysis.hpp"
#include "stmssm/parallel.hpp"
#include "stmssm/probe_bench.hpp"
#include "stmssm/random.hpp"
#include "stmssm/run_config.hpp"
#include "stmssm/ssm_core.hpp"
#include "stmssm/tensor.hpp"
#include "stmssm/token_merge.hpp"
#include "stmssm/tome_baseline.hpp"
#include "stmssm/verify_suites.hpp"
#include "stmssm/vim_stack.hpp"
