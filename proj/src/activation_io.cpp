#include "kvatlas/activation_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <stdexcept>

#include "binary_io.hpp"

namespace kvatlas {

namespace {

constexpr char kDumpMagic[4] = {'K', 'V', 'D', '1'};
constexpr std::uint8_t kDumpVersion = 1;
constexpr std::uint8_t kDtypeFloat32 = 1;

}  // namespace

const char* to_string(VectorKind kind) {
  switch (kind) {
    case VectorKind::Key: return "key";
    case VectorKind::Value: return "value";
    case VectorKind::Query: return "query";
  }
  return "unknown";
}

VectorKind parse_vector_kind(const std::string& text) {
  if (text == "key" || text == "k") return VectorKind::Key;
  if (text == "value" || text == "v") return VectorKind::Value;
  if (text == "query" || text == "q") return VectorKind::Query;
  throw std::invalid_argument("unknown vector kind '" + text + "' (expected key|value|query)");
}

ActivationDataset::ActivationDataset(std::size_t d_head, VectorKind kind, std::vector<float> values,
                                     std::uint32_t layer_index, std::uint32_t head_index,
                                     std::string model_tag)
    : d_head_(d_head),
      kind_(kind),
      layer_index_(layer_index),
      head_index_(head_index),
      model_tag_(std::move(model_tag)),
      values_(std::move(values)) {}

std::vector<double> ActivationDataset::row_as_double(std::size_t i) const {
  const auto r = row(i);
  return {r.begin(), r.end()};
}

Matrix ActivationDataset::to_matrix() const {
  Matrix m(count(), d_head_);
  std::copy(values_.begin(), values_.end(), m.flat().begin());
  return m;
}

ActivationDataset ActivationDataset::subset(std::span<const std::size_t> indices) const {
  std::vector<float> out;
  out.reserve(indices.size() * d_head_);
  for (std::size_t i : indices) {
    if (i >= count()) throw std::out_of_range("subset index out of range");
    const auto r = row(i);
    out.insert(out.end(), r.begin(), r.end());
  }
  return {d_head_, kind_, std::move(out), layer_index_, head_index_, model_tag_};
}

void ActivationDataset::validate() const {
  if (d_head_ == 0) throw std::invalid_argument("d_head must be positive");
  if (values_.size() % d_head_ != 0) {
    throw std::invalid_argument("every vector must have length exactly d_head");
  }
  if (values_.empty()) throw std::invalid_argument("count >= 1 violated");
  for (std::size_t i = 0; i < values_.size(); ++i) {
    if (!std::isfinite(values_[i])) {
      throw std::invalid_argument("non-finite value in vector " + std::to_string(i / d_head_));
    }
  }
}

ActivationDataset dataset_from_matrix(const Matrix& rows, VectorKind kind,
                                      std::uint32_t layer_index, std::uint32_t head_index,
                                      std::string model_tag) {
  std::vector<float> values(rows.size());
  std::transform(rows.flat().begin(), rows.flat().end(), values.begin(),
                 [](double v) { return static_cast<float>(v); });
  return {rows.cols(), kind, std::move(values), layer_index, head_index, std::move(model_tag)};
}

void write_dump(const ActivationDataset& dataset, std::ostream& out) {
  dataset.validate();
  out.write(kDumpMagic, 4);
  detail::put_le<std::uint8_t>(out, kDumpVersion);
  detail::put_le<std::uint8_t>(out, kDtypeFloat32);
  detail::put_le<std::uint8_t>(out, static_cast<std::uint8_t>(dataset.kind()));
  detail::put_le<std::uint8_t>(out, 0);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(dataset.d_head()));
  detail::put_le<std::uint32_t>(out, dataset.layer_index());
  detail::put_le<std::uint32_t>(out, dataset.head_index());
  detail::put_le<std::uint64_t>(out, dataset.count());
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(dataset.model_tag().size()));
  out.write(dataset.model_tag().data(), static_cast<std::streamsize>(dataset.model_tag().size()));
  detail::put_f32_block(out, dataset.values());
  if (!out) throw std::runtime_error("failed writing activation dump");
}

void write_dump(const ActivationDataset& dataset, const std::filesystem::path& path) {
  dataset.validate();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  write_dump(dataset, out);
  out.close();
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

ActivationDataset read_dump(std::istream& in, const std::string& source_name) {
  detail::Reader reader(in, source_name);
  char magic[4];
  reader.read_exact(magic, 4, "header");
  if (!std::equal(magic, magic + 4, kDumpMagic)) {
    throw std::runtime_error(source_name + ": bad magic (expected KVD1)");
  }
  const auto version = reader.get<std::uint8_t>("header");
  if (version != kDumpVersion) {
    throw std::runtime_error(source_name + ": unsupported version " + std::to_string(version));
  }
  const auto dtype = reader.get<std::uint8_t>("header");
  if (dtype != kDtypeFloat32) {
    throw std::runtime_error(source_name + ": unsupported dtype code " + std::to_string(dtype));
  }
  const auto kind_code = reader.get<std::uint8_t>("header");
  if (kind_code > 2) {
    throw std::runtime_error(source_name + ": unknown vector kind " + std::to_string(kind_code));
  }
  reader.get<std::uint8_t>("header");  // reserved
  const auto d_head = reader.get<std::uint32_t>("header");
  const auto layer = reader.get<std::uint32_t>("header");
  const auto head = reader.get<std::uint32_t>("header");
  const auto count = reader.get<std::uint64_t>("header");
  const auto tag_len = reader.get<std::uint32_t>("header");
  std::string tag(tag_len, '\0');
  reader.read_exact(tag.data(), tag_len, "model tag");
  if (d_head == 0) throw std::runtime_error(source_name + ": d_head is zero");
  if (count == 0) throw std::runtime_error(source_name + ": count >= 1 violated");

  std::vector<float> values;
  // Grow in bounded chunks so a corrupt count cannot trigger a huge allocation up front.
  const std::uint64_t total = count * d_head;
  constexpr std::uint64_t kChunk = 1u << 20;
  for (std::uint64_t done = 0; done < total;) {
    const auto n = static_cast<std::size_t>(std::min(kChunk, total - done));
    values.resize(values.size() + n);
    try {
      reader.get_f32_block(std::span<float>(values.data() + done, n), "payload");
    } catch (const std::runtime_error&) {
      const std::size_t got = reader.consumed();
      const std::size_t expected = dump_header_bytes(tag_len) + total * sizeof(float);
      throw std::runtime_error(source_name + ": truncated payload: expected " +
                               std::to_string(expected) + " bytes, got " + std::to_string(got));
    }
    done += n;
  }
  ActivationDataset dataset(d_head, static_cast<VectorKind>(kind_code), std::move(values), layer,
                            head, std::move(tag));
  try {
    dataset.validate();
  } catch (const std::invalid_argument& e) {
    throw std::runtime_error(source_name + ": " + e.what());
  }
  return dataset;
}

ActivationDataset read_dump(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string() + ": missing file");
  return read_dump(in, path.string());
}

void SyntheticSpec::validate() const {
  if (true_dict_size == 0) throw std::invalid_argument("true_dict_size must be positive");
  if (d_head == 0) throw std::invalid_argument("d_head must be positive");
  if (atoms_per_sample == 0) throw std::invalid_argument("atoms_per_sample must be positive");
  if (atoms_per_sample > true_dict_size) {
    throw std::invalid_argument("atoms_per_sample <= true_dict_size violated (" +
                                std::to_string(atoms_per_sample) + " > " +
                                std::to_string(true_dict_size) + ")");
  }
  if (!(coeff_low > 0.0)) throw std::invalid_argument("coeff_low > 0 violated");
  if (!(coeff_low <= coeff_high)) throw std::invalid_argument("coeff_low <= coeff_high violated");
  if (!(noise_sigma >= 0.0)) throw std::invalid_argument("noise_sigma >= 0 violated");
  if (sample_count == 0) throw std::invalid_argument("sample_count must be positive");
}

SyntheticData generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  const std::size_t n_atoms = spec.true_dict_size;
  const std::size_t d = spec.d_head;
  const std::size_t s = spec.atoms_per_sample;

  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);

  GroundTruth truth;
  truth.atoms_per_sample = spec.atoms_per_sample;
  truth.atoms = Matrix(n_atoms, d);
  for (std::size_t a = 0; a < n_atoms; ++a) {
    auto atom = truth.atoms.row(a);
    double norm2 = 0.0;
    do {
      for (double& v : atom) v = gauss(rng);
      norm2 = squared_norm(atom);
    } while (norm2 < 1e-12);
    const double inv = 1.0 / std::sqrt(norm2);
    // Atoms are held at float32 precision so the sidecar reproduces them exactly.
    for (double& v : atom) v = static_cast<float>(v * inv);
  }

  std::uniform_real_distribution<double> coeff(spec.coeff_low, spec.coeff_high);
  std::normal_distribution<double> noise(0.0, spec.noise_sigma > 0.0 ? spec.noise_sigma : 1.0);

  std::vector<std::uint32_t> pool(n_atoms);
  std::vector<float> values(spec.sample_count * d);
  truth.indices.resize(spec.sample_count * s);
  truth.coefficients.resize(spec.sample_count * s);
  std::vector<double> x(d);

  for (std::size_t i = 0; i < spec.sample_count; ++i) {
    for (std::size_t a = 0; a < n_atoms; ++a) pool[a] = static_cast<std::uint32_t>(a);
    // Partial Fisher-Yates: the first s slots become a uniform s-subset.
    for (std::size_t j = 0; j < s; ++j) {
      std::uniform_int_distribution<std::size_t> pick(j, n_atoms - 1);
      std::swap(pool[j], pool[pick(rng)]);
    }
    std::sort(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(s));
    std::fill(x.begin(), x.end(), 0.0);
    for (std::size_t j = 0; j < s; ++j) {
      const auto atom_index = pool[j];
      const double c = static_cast<float>(coeff(rng));
      truth.indices[i * s + j] = atom_index;
      truth.coefficients[i * s + j] = static_cast<float>(c);
      const auto atom = truth.atoms.row(atom_index);
      for (std::size_t t = 0; t < d; ++t) x[t] += c * atom[t];
    }
    if (spec.noise_sigma > 0.0) {
      for (double& v : x) v += noise(rng);
    }
    for (std::size_t t = 0; t < d; ++t) values[i * d + t] = static_cast<float>(x[t]);
  }

  ActivationDataset dataset(d, spec.kind, std::move(values), 0, 0, "synthetic");
  return {std::move(dataset), std::move(truth)};
}

std::filesystem::path ground_truth_path(const std::filesystem::path& dump_path) {
  auto p = dump_path;
  p += ".gt";
  return p;
}

void write_ground_truth(const GroundTruth& truth, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  const std::size_t s = truth.atoms_per_sample;
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(truth.atoms.rows()));
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(truth.atoms.cols()));
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(s));
  for (double v : truth.atoms.flat()) detail::put_f32(out, static_cast<float>(v));
  for (std::size_t i = 0; i < truth.sample_count(); ++i) {
    for (std::uint32_t idx : truth.sample_indices(i)) detail::put_le<std::uint32_t>(out, idx);
    for (float c : truth.sample_coefficients(i)) detail::put_f32(out, c);
  }
  out.close();
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

GroundTruth read_ground_truth(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string() + ": missing file");
  detail::Reader reader(in, path.string());
  GroundTruth truth;
  const auto n_atoms = reader.get<std::uint32_t>("header");
  const auto d = reader.get<std::uint32_t>("header");
  const auto s = reader.get<std::uint32_t>("header");
  if (s == 0 || d == 0) throw std::runtime_error(path.string() + ": empty ground truth header");
  truth.atoms_per_sample = s;
  truth.atoms = Matrix(n_atoms, d);
  for (double& v : truth.atoms.flat()) v = reader.get_f32("atoms");
  while (in.peek() != std::char_traits<char>::eof()) {
    for (std::uint32_t j = 0; j < s; ++j) {
      truth.indices.push_back(reader.get<std::uint32_t>("sample record"));
    }
    for (std::uint32_t j = 0; j < s; ++j) {
      truth.coefficients.push_back(reader.get_f32("sample record"));
    }
  }
  return truth;
}

}  // namespace kvatlas
