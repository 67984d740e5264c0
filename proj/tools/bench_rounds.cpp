// Wall-clock comparison of the serial client loop against the OpenMP one on
// the default federation, checking that both produce identical parameters.

#include <omp.h>

#include <chrono>
#include <cstdio>

#include "fedscal/experiment.hpp"

using namespace fedscal;

namespace {

double run_once(const ExperimentConfig& cfg, ExecutionMode mode, std::uint64_t* hash) {
    ExperimentConfig local = cfg;
    local.federation.execution = mode;
    const auto t0 = std::chrono::steady_clock::now();
    const RunResult r = run_cell(local, CellSpec{"fedscal", Method::FedSCAl,
                                                 local.federation.scal}, 1);
    const auto t1 = std::chrono::steady_clock::now();
    *hash = params_hash(r.federation.final_params);
    return std::chrono::duration<double>(t1 - t0).count();
}

}  // namespace

int main(int argc, char** argv) {
    ExperimentConfig cfg = default_experiment_config();
    if (argc > 1) cfg = load_experiment_config(argv[1]);
    cfg.federation.rounds = 10;

    std::uint64_t serial_hash = 0, parallel_hash = 0;
    const double serial_s = run_once(cfg, ExecutionMode::Serial, &serial_hash);
    const double parallel_s = run_once(cfg, ExecutionMode::Parallel, &parallel_hash);

    std::printf("threads:  %d\n", omp_get_max_threads());
    std::printf("serial:   %.3f s\n", serial_s);
    std::printf("parallel: %.3f s  (speedup %.2fx)\n", parallel_s,
                serial_s / parallel_s);
    std::printf("params match: %s\n", serial_hash == parallel_hash ? "yes" : "NO");
    return serial_hash == parallel_hash ? 0 : 1;
}
