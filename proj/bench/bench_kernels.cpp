// Serial vs OpenMP timing for the training and evaluation kernels.
//
//   bench_kernels [--rows N] [--dim D] [--expansion E] [--k K] [--reps R] [--threads T]

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <iostream>
#include <numeric>
#include <random>
#include <string>

#include "kvatlas/kernels.hpp"
#include "kvatlas/training.hpp"

using namespace kvatlas;

namespace {

struct Args {
  std::size_t rows = 4096;
  std::size_t dim = 128;
  std::size_t expansion = 32;
  std::size_t k = 32;
  int reps = 5;
  int threads = 0;
};

Args parse(int argc, char** argv) {
  Args a;
  for (int i = 1; i + 1 < argc; i += 2) {
    const std::string flag = argv[i];
    const long v = std::strtol(argv[i + 1], nullptr, 10);
    if (flag == "--rows") a.rows = static_cast<std::size_t>(v);
    else if (flag == "--dim") a.dim = static_cast<std::size_t>(v);
    else if (flag == "--expansion") a.expansion = static_cast<std::size_t>(v);
    else if (flag == "--k") a.k = static_cast<std::size_t>(v);
    else if (flag == "--reps") a.reps = static_cast<int>(v);
    else if (flag == "--threads") a.threads = static_cast<int>(v);
    else {
      std::cerr << "unknown flag " << flag << '\n';
      std::exit(2);
    }
  }
  return a;
}

template <typename F>
double best_ms(int reps, F&& f) {
  double best = 1e300;
  for (int r = 0; r < reps; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    f();
    const double ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    best = std::min(best, ms);
  }
  return best;
}

}  // namespace

int main(int argc, char** argv) {
  const Args a = parse(argc, argv);
  set_thread_count(a.threads);

  std::mt19937_64 rng(1);
  std::normal_distribution<double> g(0.0, 1.0);
  Matrix data(a.rows, a.dim);
  for (double& v : data.flat()) v = g(rng);

  TrainConfig config;
  config.k_train = a.k;
  config.expansion_factor = a.expansion;
  const auto model = init_model(a.dim, config, data, SaeVariant::TopK);

  std::vector<std::size_t> rows(a.rows);
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  auto grads = SaeGrads::zeros_like(model);
  std::vector<RowStats> stats(a.rows);

  std::cout << "rows=" << a.rows << " d_head=" << a.dim << " M=" << model.latent_size
            << " k=" << a.k << " threads=" << thread_count() << '\n';

  const double lg_serial = best_ms(a.reps, [&] {
    kernels::loss_and_grads_serial(model, data, rows, grads);
  });
  const double lg_parallel = best_ms(a.reps, [&] {
    kernels::loss_and_grads_parallel(model, data, rows, grads);
  });
  const double rc_serial = best_ms(a.reps, [&] {
    kernels::reconstruct_rows_serial(model, data, a.k, stats);
  });
  const double rc_parallel = best_ms(a.reps, [&] {
    kernels::reconstruct_rows_parallel(model, data, a.k, stats);
  });

  std::cout << "kernel            serial_ms  parallel_ms  speedup\n";
  auto line = [](const char* name, double s, double p) {
    std::printf("%-16s %10.2f %12.2f %8.2fx\n", name, s, p, s / p);
  };
  line("loss_and_grads", lg_serial, lg_parallel);
  line("reconstruct_rows", rc_serial, rc_parallel);
  return 0;
}
