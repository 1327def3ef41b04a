#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

#include "doctest.h"
#include "kvatlas/activation_io.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

using namespace kvatlas;
using testing_support::TempDir;

namespace {

ActivationDataset random_dataset(std::size_t n, std::size_t d, std::uint64_t seed,
                                 VectorKind kind = VectorKind::Key, std::string tag = "test") {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> g(0.0f, 2.0f);
  std::vector<float> v(n * d);
  for (float& x : v) x = g(rng);
  return {d, kind, std::move(v), 3, 5, std::move(tag)};
}

std::vector<char> slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST_CASE("dump size is header plus payload") {
  TempDir dir("io_size");
  const auto ds = random_dataset(3, 4, 1, VectorKind::Key, "");
  write_dump(ds, dir / "a.bin");
  CHECK(std::filesystem::file_size(dir / "a.bin") == dump_header_bytes(0) + 3 * 4 * 4);

  const auto tagged = random_dataset(3, 4, 1, VectorKind::Key, "yi-6b");
  write_dump(tagged, dir / "b.bin");
  CHECK(std::filesystem::file_size(dir / "b.bin") == dump_header_bytes(5) + 3 * 4 * 4);
}

TEST_CASE("dump header layout") {
  TempDir dir("io_header");
  const auto ds = random_dataset(2, 128, 9, VectorKind::Value, "m");
  write_dump(ds, dir / "h.bin");
  const auto bytes = slurp(dir / "h.bin");
  REQUIRE(bytes.size() == 32 + 1 + 2 * 128 * 4);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "KVD1");
  CHECK(bytes[4] == 1);
  CHECK(bytes[5] == 1);
  CHECK(bytes[6] == 1);  // Value
  CHECK(bytes[7] == 0);
  CHECK(static_cast<unsigned char>(bytes[8]) == 128);
  CHECK(bytes[12] == 3);  // layer
  CHECK(bytes[16] == 5);  // head
  CHECK(bytes[20] == 2);  // count
  CHECK(bytes[28] == 1);  // tag length
  CHECK(bytes[32] == 'm');

  const auto back = read_dump(dir / "h.bin");
  CHECK(back.count() == 2);
  CHECK(back.d_head() == 128);
  CHECK(back.kind() == VectorKind::Value);
}

TEST_CASE("empty dataset is rejected") {
  TempDir dir("io_empty");
  const ActivationDataset empty(4, VectorKind::Key, {});
  CHECK_THROWS_WITH_AS(write_dump(empty, dir / "e.bin"), "count >= 1 violated",
                       std::invalid_argument);
}

TEST_CASE("non-finite values are rejected on write and read") {
  TempDir dir("io_nan");
  auto v = std::vector<float>{1.0f, 2.0f, std::nanf(""), 4.0f};
  const ActivationDataset bad(2, VectorKind::Key, v);
  CHECK_THROWS_AS(write_dump(bad, dir / "n.bin"), std::invalid_argument);

  // Patch a NaN into a valid file's payload.
  write_dump(random_dataset(2, 2, 3), dir / "n.bin");
  {
    std::fstream f(dir / "n.bin", std::ios::binary | std::ios::in | std::ios::out);
    f.seekp(static_cast<std::streamoff>(dump_header_bytes(4) + 4));
    const float nan = std::nanf("");
    f.write(reinterpret_cast<const char*>(&nan), 4);
  }
  CHECK_THROWS_AS(read_dump(dir / "n.bin"), std::runtime_error);
}

TEST_CASE("round trip is bitwise on 10,000 random vectors") {
  TempDir dir("io_rt");
  const auto ds = random_dataset(10'000, 32, 42, VectorKind::Query, "rt");
  write_dump(ds, dir / "rt.bin");
  const auto back = read_dump(dir / "rt.bin");
  CHECK(back == ds);
  const auto a = ds.values();
  const auto b = back.values();
  CHECK(std::memcmp(a.data(), b.data(), a.size_bytes()) == 0);
}

TEST_CASE("bad magic, version and dtype") {
  TempDir dir("io_magic");
  write_dump(random_dataset(2, 4, 5), dir / "m.bin");
  auto patch = [&](std::streamoff at, char value) {
    std::fstream f(dir / "m.bin", std::ios::binary | std::ios::in | std::ios::out);
    f.seekp(at);
    f.write(&value, 1);
  };
  patch(0, 'X');
  patch(1, 'X');
  patch(2, 'X');
  patch(3, 'X');
  CHECK_THROWS_WITH_AS(read_dump(dir / "m.bin"), doctest::Contains("bad magic"),
                       std::runtime_error);

  write_dump(random_dataset(2, 4, 5), dir / "m.bin");
  patch(4, 2);
  CHECK_THROWS_WITH_AS(read_dump(dir / "m.bin"), doctest::Contains("unsupported version"),
                       std::runtime_error);

  write_dump(random_dataset(2, 4, 5), dir / "m.bin");
  patch(5, 7);
  CHECK_THROWS_WITH_AS(read_dump(dir / "m.bin"), doctest::Contains("unsupported dtype"),
                       std::runtime_error);
}

TEST_CASE("missing file") {
  CHECK_THROWS_WITH_AS(read_dump("/nonexistent/kvatlas/none.bin"),
                       doctest::Contains("missing file"), std::runtime_error);
}

TEST_CASE("truncated payload names the expected byte count") {
  TempDir dir("io_trunc");
  const auto ds = random_dataset(50, 16, 11, VectorKind::Key, "tt");
  write_dump(ds, dir / "full.bin");
  const auto bytes = slurp(dir / "full.bin");
  const std::size_t header = dump_header_bytes(2);
  const std::string expected = std::to_string(bytes.size());

  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 20; ++trial) {
    std::uniform_int_distribution<std::size_t> cut(header, bytes.size() - 1);
    const std::size_t at = cut(rng);
    {
      std::ofstream out(dir / "cut.bin", std::ios::binary | std::ios::trunc);
      out.write(bytes.data(), static_cast<std::streamsize>(at));
    }
    try {
      read_dump(dir / "cut.bin");
      FAIL("truncated file was accepted");
    } catch (const std::runtime_error& e) {
      const std::string msg = e.what();
      CHECK(msg.find("truncated payload") != std::string::npos);
      CHECK(msg.find("expected " + expected + " bytes") != std::string::npos);
      CHECK(msg.find("got " + std::to_string(at)) != std::string::npos);
    }
  }
}

TEST_CASE("synthetic generation is a pure function of the seed") {
  SyntheticSpec spec;
  spec.sample_count = 500;
  spec.seed = 99;
  const auto a = generate_synthetic(spec);
  const auto b = generate_synthetic(spec);
  CHECK(a.dataset == b.dataset);
  CHECK(a.truth.atoms == b.truth.atoms);
  CHECK(a.truth.indices == b.truth.indices);
  CHECK(a.truth.coefficients == b.truth.coefficients);

  spec.seed = 100;
  const auto c = generate_synthetic(spec);
  CHECK_FALSE(a.dataset == c.dataset);
}

TEST_CASE("degenerate spec yields exactly one unit atom per sample") {
  SyntheticSpec spec;
  spec.true_dict_size = 10;
  spec.d_head = 8;
  spec.atoms_per_sample = 1;
  spec.coeff_low = spec.coeff_high = 1.0;
  spec.noise_sigma = 0.0;
  spec.sample_count = 200;
  spec.seed = 3;
  const auto syn = generate_synthetic(spec);
  for (std::size_t i = 0; i < syn.dataset.count(); ++i) {
    const auto atom = syn.truth.atoms.row(syn.truth.sample_indices(i)[0]);
    const auto row = syn.dataset.row(i);
    for (std::size_t t = 0; t < spec.d_head; ++t) {
      CHECK(row[t] == static_cast<float>(atom[t]));
    }
  }
}

TEST_CASE("atoms are unit norm") {
  SyntheticSpec spec;
  spec.true_dict_size = 256;
  spec.d_head = 64;
  spec.sample_count = 1;
  const auto syn = generate_synthetic(spec);
  for (std::size_t a = 0; a < syn.truth.atoms.rows(); ++a) {
    CHECK(std::abs(std::sqrt(squared_norm(syn.truth.atoms.row(a))) - 1.0) <= 1e-6);
  }
}

TEST_CASE("residual after projecting onto true atoms is within 5 sigma sqrt(d)") {
  SyntheticSpec spec;  // M*=64, d=32, s=4, [0.5,1.5], sigma=0.01, n=50,000
  spec.seed = 7;
  const auto syn = generate_synthetic(spec);
  const double bound = 5.0 * spec.noise_sigma * std::sqrt(static_cast<double>(spec.d_head));
  std::size_t within = 0;
  for (std::size_t i = 0; i < syn.dataset.count(); ++i) {
    oracle::Mat atoms;
    for (std::uint32_t a : syn.truth.sample_indices(i)) {
      const auto r = syn.truth.atoms.row(a);
      atoms.emplace_back(r.begin(), r.end());
    }
    const auto x = syn.dataset.row_as_double(i);
    if (oracle::projection_residual(atoms, x) <= bound) ++within;
  }
  CHECK(static_cast<double>(within) >= 0.99 * static_cast<double>(syn.dataset.count()));
}

TEST_CASE("synthetic spec validation") {
  SyntheticSpec spec;
  spec.true_dict_size = 64;
  spec.atoms_per_sample = 100;
  CHECK_THROWS_WITH_AS(generate_synthetic(spec),
                       doctest::Contains("atoms_per_sample <= true_dict_size"),
                       std::invalid_argument);
  spec.atoms_per_sample = 4;
  spec.coeff_low = 0.0;
  CHECK_THROWS_WITH_AS(spec.validate(), doctest::Contains("coeff_low > 0"),
                       std::invalid_argument);
}

TEST_CASE("ground-truth sidecar round trip") {
  TempDir dir("io_gt");
  SyntheticSpec spec;
  spec.sample_count = 300;
  spec.seed = 12;
  const auto syn = generate_synthetic(spec);
  write_dump(syn.dataset, dir / "kv.bin");
  write_ground_truth(syn.truth, ground_truth_path(dir / "kv.bin"));
  CHECK(ground_truth_path(dir / "kv.bin").filename() == "kv.bin.gt");
  CHECK(std::filesystem::file_size(ground_truth_path(dir / "kv.bin")) ==
        12 + 64 * 32 * 4 + 300 * 4 * 8);

  const auto back = read_ground_truth(ground_truth_path(dir / "kv.bin"));
  CHECK(back.atoms == syn.truth.atoms);
  CHECK(back.indices == syn.truth.indices);
  CHECK(back.coefficients == syn.truth.coefficients);
  CHECK(back.sample_count() == 300);
}

TEST_CASE("scenario bundle is three dumps back to back") {
  TempDir dir("io_stream");
  const auto a = random_dataset(3, 4, 1, VectorKind::Query, "x");
  const auto b = random_dataset(5, 4, 2, VectorKind::Key, "x");
  std::stringstream buf;
  write_dump(a, buf);
  write_dump(b, buf);
  CHECK(read_dump(buf, "mem") == a);
  CHECK(read_dump(buf, "mem") == b);
}
