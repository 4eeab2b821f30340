// File formats and configuration.
//
// DatasetFile ("DCDS"): magic, version u32, n u64, m u64, label flag u8,
//   then row-major little-endian f32 features and, when flagged, u32 labels.
// Checkpoint ("DCGM"): magic, version u32, network spec, K, then named f64
//   tensors (u16 name length + name, u32 rank, u64 dims, payload).
// Constraint CSV: one `i,j,w` line per stored pair (0-based, f64 weight).
// RunConfig JSON: strict, unknown keys are rejected.
//
// All writers go through a temp file + rename, so artifacts are atomic.

#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "dcgmm/errors.hpp"
#include "dcgmm/model.hpp"
#include "dcgmm/prior.hpp"
#include "dcgmm/rng.hpp"
#include "dcgmm/tensor.hpp"
#include "dcgmm/trainer.hpp"

static_assert(std::endian::native == std::endian::little,
              "file formats are little-endian; big-endian hosts need byte "
              "swapping that is not implemented");

namespace dcgmm::io {

namespace detail {

template <typename T> void write_pod(std::ostream &os, const T &v) {
  os.write(reinterpret_cast<const char *>(&v), sizeof(T));
}

template <typename T> T read_pod(std::istream &is, const char *what) {
  T v{};
  is.read(reinterpret_cast<char *>(&v), sizeof(T));
  if (!is) {
    throw DataError(std::string("truncated file while reading ") + what +
                    " (expected " + std::to_string(sizeof(T)) + " bytes)");
  }
  return v;
}

inline void read_bytes(std::istream &is, void *dst, std::size_t bytes,
                       const char *what) {
  is.read(reinterpret_cast<char *>(dst), static_cast<std::streamsize>(bytes));
  const auto got = static_cast<std::size_t>(is.gcount());
  if (got != bytes) {
    throw DataError(std::string("truncated file while reading ") + what +
                    ": expected " + std::to_string(bytes) + " bytes, got " +
                    std::to_string(got));
  }
}

// Write-to-temp-then-rename; the visible file is never half-written.
class AtomicFile {
public:
  explicit AtomicFile(const std::filesystem::path &target)
      : target_(target), tmp_(target.string() + ".tmp") {
    if (target.has_parent_path()) {
      std::filesystem::create_directories(target.parent_path());
    }
    stream_.open(tmp_, std::ios::binary | std::ios::trunc);
    if (!stream_) throw DataError("cannot open " + tmp_.string() + " for writing");
  }

  std::ofstream &stream() { return stream_; }

  void commit() {
    stream_.flush();
    if (!stream_) throw DataError("write failed for " + tmp_.string());
    stream_.close();
    std::filesystem::rename(tmp_, target_);
    committed_ = true;
  }

  ~AtomicFile() {
    if (!committed_) {
      stream_.close();
      std::error_code ec;
      std::filesystem::remove(tmp_, ec);
    }
  }

private:
  std::filesystem::path target_, tmp_;
  std::ofstream stream_;
  bool committed_ = false;
};

} // namespace detail

// ---------------------------------------------------------------------------
// Dataset container
// ---------------------------------------------------------------------------

struct Dataset {
  Tensor features; // n x m, f64 in memory
  std::vector<int> labels;
  [[nodiscard]] bool has_labels() const { return !labels.empty(); }
  [[nodiscard]] std::size_t n() const { return features.rows(); }
  [[nodiscard]] std::size_t m() const { return features.cols(); }
};

inline constexpr char kDatasetMagic[4] = {'D', 'C', 'D', 'S'};
inline constexpr std::uint32_t kDatasetVersion = 1;

inline void save_dataset(const std::filesystem::path &path, const Dataset &ds) {
  if (ds.has_labels() && ds.labels.size() != ds.n()) {
    throw DataError("save_dataset: " + std::to_string(ds.labels.size()) +
                    " labels for " + std::to_string(ds.n()) + " rows");
  }
  detail::AtomicFile file(path);
  auto &os = file.stream();
  os.write(kDatasetMagic, 4);
  detail::write_pod(os, kDatasetVersion);
  detail::write_pod(os, static_cast<std::uint64_t>(ds.n()));
  detail::write_pod(os, static_cast<std::uint64_t>(ds.m()));
  detail::write_pod(os, static_cast<std::uint8_t>(ds.has_labels() ? 1 : 0));
  for (std::size_t i = 0; i < ds.features.numel(); ++i) {
    detail::write_pod(os, static_cast<float>(ds.features[i]));
  }
  for (int label : ds.labels) {
    detail::write_pod(os, static_cast<std::uint32_t>(label));
  }
  file.commit();
}

inline Dataset load_dataset_binary(const std::filesystem::path &path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open dataset " + path.string());
  char magic[4];
  detail::read_bytes(is, magic, 4, "magic");
  if (std::memcmp(magic, kDatasetMagic, 4) != 0) {
    throw DataError("bad dataset magic in " + path.string() +
                    " (expected DCDS)");
  }
  const auto version = detail::read_pod<std::uint32_t>(is, "version");
  if (version != kDatasetVersion) {
    throw DataError("unsupported dataset version " + std::to_string(version));
  }
  const auto n = detail::read_pod<std::uint64_t>(is, "n");
  const auto m = detail::read_pod<std::uint64_t>(is, "m");
  const auto flag = detail::read_pod<std::uint8_t>(is, "label flag");

  Dataset ds;
  ds.features = Tensor({static_cast<std::size_t>(n), static_cast<std::size_t>(m)});
  std::vector<float> row(static_cast<std::size_t>(m));
  for (std::uint64_t i = 0; i < n; ++i) {
    detail::read_bytes(is, row.data(), sizeof(float) * row.size(), "features");
    for (std::uint64_t j = 0; j < m; ++j) {
      const float v = row[j];
      if (!std::isfinite(v)) {
        throw DataError("non-finite feature at row " + std::to_string(i) +
                        " col " + std::to_string(j));
      }
      ds.features.at(i, j) = static_cast<double>(v);
    }
  }
  if (flag != 0) {
    std::vector<std::uint32_t> labels(static_cast<std::size_t>(n));
    detail::read_bytes(is, labels.data(), sizeof(std::uint32_t) * labels.size(),
                       "labels");
    ds.labels.assign(labels.begin(), labels.end());
  }
  return ds;
}

// CSV fallback: one sample per line; when `labeled`, the last column is the
// integer label.
inline Dataset load_dataset_csv(const std::filesystem::path &path,
                                bool labeled) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open dataset " + path.string());
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      try {
        row.push_back(std::stod(cell));
      } catch (const std::exception &) {
        throw DataError("bad CSV cell '" + cell + "' in " + path.string());
      }
    }
    if (!rows.empty() && row.size() != rows.front().size()) {
      throw DataError("ragged CSV row in " + path.string());
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw DataError("empty dataset " + path.string());
  const std::size_t cols = rows.front().size();
  if (labeled && cols < 2) {
    throw DataError("labeled CSV needs at least two columns");
  }
  Dataset ds;
  const std::size_t m = labeled ? cols - 1 : cols;
  ds.features = Tensor({rows.size(), m});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      if (!std::isfinite(rows[i][j])) {
        throw DataError("non-finite feature at row " + std::to_string(i));
      }
      ds.features.at(i, j) = rows[i][j];
    }
    if (labeled) ds.labels.push_back(static_cast<int>(rows[i][cols - 1]));
  }
  return ds;
}

// Sniffs the binary magic, falls back to CSV.
inline Dataset load_dataset(const std::filesystem::path &path,
                            bool csv_labeled = false) {
  {
    std::ifstream probe(path, std::ios::binary);
    if (!probe) throw DataError("cannot open dataset " + path.string());
    char magic[4] = {0, 0, 0, 0};
    probe.read(magic, 4);
    if (probe.gcount() == 4 && std::memcmp(magic, kDatasetMagic, 4) == 0) {
      return load_dataset_binary(path);
    }
  }
  return load_dataset_csv(path, csv_labeled);
}

// ---------------------------------------------------------------------------
// Train/test split
// ---------------------------------------------------------------------------

struct Split {
  Dataset train;
  Dataset test;
  std::vector<std::size_t> train_indices;
  std::vector<std::size_t> test_indices;
};

inline Split split(const Dataset &ds, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0)) {
    throw ConfigError("split: fraction must be in (0, 1)");
  }
  const std::size_t n = ds.n();
  const auto n_train = static_cast<std::size_t>(
      std::llround(fraction * static_cast<double>(n)));
  if (n_train == 0 || n_train >= n) {
    throw DataError("split: degenerate sizes " + std::to_string(n_train) +
                    "/" + std::to_string(n - n_train));
  }
  Rng rng(seed);
  std::vector<std::size_t> perm = rng.permutation(n);
  Split out;
  out.train_indices.assign(perm.begin(), perm.begin() + static_cast<long>(n_train));
  out.test_indices.assign(perm.begin() + static_cast<long>(n_train), perm.end());
  auto materialize = [&](const std::vector<std::size_t> &idx) {
    Dataset part;
    part.features = take_rows(ds.features, idx);
    if (ds.has_labels()) {
      part.labels.reserve(idx.size());
      for (std::size_t i : idx) part.labels.push_back(ds.labels[i]);
    }
    return part;
  };
  out.train = materialize(out.train_indices);
  out.test = materialize(out.test_indices);
  return out;
}

// ---------------------------------------------------------------------------
// Constraint CSV
// ---------------------------------------------------------------------------

inline void save_constraints_csv(const std::filesystem::path &path,
                                 const PairwiseWeights &w) {
  detail::AtomicFile file(path);
  auto entries = w.entries();
  std::sort(entries.begin(), entries.end(), [](const auto &a, const auto &b) {
    return a.i != b.i ? a.i < b.i : a.j < b.j;
  });
  char buf[96];
  for (const auto &e : entries) {
    std::snprintf(buf, sizeof(buf), "%zu,%zu,%.17g\n", e.i, e.j, e.w);
    file.stream() << buf;
  }
  file.commit();
}

inline PairwiseWeights load_constraints_csv(const std::filesystem::path &path,
                                            std::size_t n) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open constraints " + path.string());
  PairwiseWeights w(n);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::size_t i = 0, j = 0;
    double v = 0.0;
    if (std::sscanf(line.c_str(), "%zu,%zu,%lf", &i, &j, &v) != 3) {
      throw DataError("bad constraint line " + std::to_string(lineno) +
                      " in " + path.string());
    }
    w.set(i, j, v); // validates i != j and index range
  }
  return w;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

inline constexpr char kCheckpointMagic[4] = {'D', 'C', 'G', 'M'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const std::filesystem::path &path,
                            const NetworkSpec &spec, std::size_t k,
                            const ParamSnapshot &params) {
  detail::AtomicFile file(path);
  auto &os = file.stream();
  os.write(kCheckpointMagic, 4);
  detail::write_pod(os, kCheckpointVersion);
  detail::write_pod(os, static_cast<std::uint32_t>(spec.input_dim));
  detail::write_pod(os, static_cast<std::uint32_t>(spec.hidden.size()));
  for (std::size_t h : spec.hidden)
    detail::write_pod(os, static_cast<std::uint32_t>(h));
  detail::write_pod(os, static_cast<std::uint32_t>(spec.latent_dim));
  detail::write_pod(os, static_cast<std::uint8_t>(
                            spec.decoder == DecoderFamily::bernoulli ? 0 : 1));
  detail::write_pod(os, static_cast<std::uint32_t>(k));
  detail::write_pod(os, static_cast<std::uint64_t>(params.size()));
  for (const auto &[name, tensor] : params) {
    detail::write_pod(os, static_cast<std::uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_pod(os, static_cast<std::uint32_t>(tensor.ndim()));
    for (std::size_t d : tensor.shape())
      detail::write_pod(os, static_cast<std::uint64_t>(d));
    os.write(reinterpret_cast<const char *>(tensor.data()),
             static_cast<std::streamsize>(sizeof(double) * tensor.numel()));
  }
  file.commit();
}

struct Checkpoint {
  NetworkSpec spec;
  std::size_t k = 0;
  ParamSnapshot params;
};

inline Checkpoint load_checkpoint(const std::filesystem::path &path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint " + path.string());
  char magic[4];
  detail::read_bytes(is, magic, 4, "magic");
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0) {
    throw DataError("bad checkpoint magic in " + path.string() +
                    " (expected DCGM)");
  }
  const auto version = detail::read_pod<std::uint32_t>(is, "version");
  if (version != kCheckpointVersion) {
    throw DataError("unsupported checkpoint version " +
                    std::to_string(version));
  }
  Checkpoint ckpt;
  ckpt.spec.input_dim = detail::read_pod<std::uint32_t>(is, "input_dim");
  const auto n_hidden = detail::read_pod<std::uint32_t>(is, "hidden count");
  ckpt.spec.hidden.clear();
  for (std::uint32_t i = 0; i < n_hidden; ++i) {
    ckpt.spec.hidden.push_back(detail::read_pod<std::uint32_t>(is, "hidden"));
  }
  ckpt.spec.latent_dim = detail::read_pod<std::uint32_t>(is, "latent_dim");
  ckpt.spec.decoder = detail::read_pod<std::uint8_t>(is, "decoder") == 0
                          ? DecoderFamily::bernoulli
                          : DecoderFamily::gaussian;
  ckpt.k = detail::read_pod<std::uint32_t>(is, "k");
  const auto n_tensors = detail::read_pod<std::uint64_t>(is, "tensor count");
  for (std::uint64_t t = 0; t < n_tensors; ++t) {
    const auto name_len = detail::read_pod<std::uint16_t>(is, "name length");
    std::string name(name_len, '\0');
    detail::read_bytes(is, name.data(), name_len, "name");
    const auto ndim = detail::read_pod<std::uint32_t>(is, "rank");
    std::vector<std::size_t> shape;
    for (std::uint32_t d = 0; d < ndim; ++d) {
      shape.push_back(static_cast<std::size_t>(
          detail::read_pod<std::uint64_t>(is, "dimension")));
    }
    Tensor tensor(shape);
    detail::read_bytes(is, tensor.data(), sizeof(double) * tensor.numel(),
                       "tensor payload");
    ckpt.params.emplace_back(std::move(name), std::move(tensor));
  }
  return ckpt;
}

// Rebuilds a model/mixture pair from a checkpoint.
inline std::pair<VaeModel, MixtureParams>
instantiate_checkpoint(const Checkpoint &ckpt) {
  VaeModel model(ckpt.spec);
  MixtureParams mix = MixtureParams::create(ckpt.k, ckpt.spec.latent_dim);
  restore_parameters(model, mix, ckpt.params);
  return {std::move(model), std::move(mix)};
}

// ---------------------------------------------------------------------------
// Run configuration (strict JSON)
// ---------------------------------------------------------------------------

struct RunFile {
  RunConfig config;
  std::filesystem::path dataset;
  std::filesystem::path constraints; // empty = unconstrained
  std::filesystem::path output_dir = ".";
  bool csv_labeled = false;
};

inline RunFile parse_run_file(const std::string &text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const std::exception &e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  RunFile out;
  RunConfig &c = out.config;
  for (const auto &[key, value] : j.items()) {
    try {
      if (key == "k") c.k = value.get<std::size_t>();
      else if (key == "latent_dim") c.latent_dim = value.get<std::size_t>();
      else if (key == "hidden") c.hidden = value.get<std::vector<std::size_t>>();
      else if (key == "batch_size") c.batch_size = value.get<std::size_t>();
      else if (key == "epochs") c.epochs = value.get<std::size_t>();
      else if (key == "learning_rate") c.learning_rate = value.get<double>();
      else if (key == "lr_decay") c.lr_decay = value.get<double>();
      else if (key == "lr_decay_every") c.lr_decay_every = value.get<std::size_t>();
      else if (key == "pretrain_epochs") c.pretrain_epochs = value.get<std::size_t>();
      else if (key == "seed") c.seed = value.get<std::uint64_t>();
      else if (key == "train_fraction") c.train_fraction = value.get<double>();
      else if (key == "grad_clip") c.grad_clip = value.get<double>();
      else if (key == "decoder") {
        const auto s = value.get<std::string>();
        if (s == "bernoulli") c.decoder = DecoderFamily::bernoulli;
        else if (s == "gaussian") c.decoder = DecoderFamily::gaussian;
        else throw ConfigError("config: unknown decoder '" + s + "'");
      } else if (key == "batching") {
        const auto s = value.get<std::string>();
        if (s == "uniform") c.batching = BatchingMode::uniform;
        else if (s == "pair-aware") c.batching = BatchingMode::pair_aware;
        else throw ConfigError("config: unknown batching mode '" + s + "'");
      } else if (key == "dataset") {
        out.dataset = value.get<std::string>();
      } else if (key == "constraints") {
        out.constraints = value.get<std::string>();
      } else if (key == "output_dir") {
        out.output_dir = value.get<std::string>();
      } else if (key == "csv_labeled") {
        out.csv_labeled = value.get<bool>();
      } else {
        throw ConfigError("config: unknown key '" + key + "'");
      }
    } catch (const ConfigError &) {
      throw;
    } catch (const std::exception &e) {
      throw ConfigError("config: bad value for '" + key + "': " + e.what());
    }
  }
  c.validate();
  return out;
}

inline RunFile load_run_file(const std::filesystem::path &path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open config " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_run_file(ss.str());
}

// ---------------------------------------------------------------------------
// Logs and exports
// ---------------------------------------------------------------------------

// Per-epoch breakdown, learning rate, and test metrics. Wall-clock timing
// goes to the progress stream instead, so the written log is byte-identical
// across reruns of the same (config, seed, data).
inline void save_trainlog_csv(const std::filesystem::path &path,
                              const TrainLog &log) {
  detail::AtomicFile file(path);
  auto &os = file.stream();
  os << "epoch,reconstruction,log_p_z_given_c,log_prior_pi,q_entropy,"
        "cat_entropy,pairwise,total,lr,test_acc,test_nmi,test_ari\n";
  char buf[512];
  for (const auto &row : log.rows) {
    std::snprintf(buf, sizeof(buf),
                  "%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,"
                  "%.17g,%.17g\n",
                  row.epoch, row.sums.reconstruction, row.sums.log_p_z_given_c,
                  row.sums.log_prior_pi, row.sums.q_entropy,
                  row.sums.cat_entropy, row.sums.pairwise, row.sums.total,
                  row.lr, row.test_acc, row.test_nmi, row.test_ari);
    os << buf;
  }
  file.commit();
}

// (mu_phi(x), assigned cluster, true label) rows for external PCA/plotting.
inline void save_embeddings_csv(const std::filesystem::path &path,
                                const VaeModel &model,
                                const MixtureParams &mixture,
                                const Dataset &ds) {
  const Tensor latents = encode_means(model, ds.features);
  const std::vector<int> assigned = cluster_assign(model, mixture, ds.features);
  detail::AtomicFile file(path);
  auto &os = file.stream();
  for (std::size_t j = 0; j < latents.cols(); ++j) os << "z" << j << ",";
  os << "cluster,label\n";
  char buf[64];
  for (std::size_t i = 0; i < latents.rows(); ++i) {
    for (std::size_t j = 0; j < latents.cols(); ++j) {
      std::snprintf(buf, sizeof(buf), "%.17g,", latents.at(i, j));
      os << buf;
    }
    os << assigned[i] << "," << (ds.has_labels() ? ds.labels[i] : -1) << "\n";
  }
  file.commit();
}

} // namespace dcgmm::io
