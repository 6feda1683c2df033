// SPDX-License-Identifier: Apache-2.0
#include "rar/gridtok.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "json.hpp"

namespace rar {

using nlohmann::json;

void GridSpec::validate() const {
  if (height < 1 || width < 1) throw std::invalid_argument("GridSpec: empty grid");
  if (vocab_size < 2) throw std::invalid_argument("GridSpec: vocab_size must be at least 2");
  if (vocab_size > 65535) throw std::invalid_argument("GridSpec: vocab_size exceeds token width");
  if (num_classes < 1) throw std::invalid_argument("GridSpec: need at least one class");
  if (static_cast<int>(field.size()) != num_classes ||
      static_cast<int>(coupling.size()) != num_classes)
    throw std::invalid_argument("GridSpec: table count must equal num_classes");
  for (const auto& f : field)
    if (static_cast<int>(f.size()) != vocab_size)
      throw std::invalid_argument("GridSpec: field table must have vocab_size entries");
  for (const auto& c : coupling)
    if (static_cast<int>(c.size()) != vocab_size * vocab_size)
      throw std::invalid_argument("GridSpec: coupling table must have vocab_size^2 entries");
  for (const auto& f : field)
    for (double v : f)
      if (!std::isfinite(v)) throw std::invalid_argument("GridSpec: non-finite field entry");
  for (const auto& c : coupling)
    for (double v : c)
      if (!std::isfinite(v)) throw std::invalid_argument("GridSpec: non-finite coupling entry");
}

std::string GridSpec::canonical_json() const {
  json j;
  j["height"] = height;
  j["width"] = width;
  j["vocab_size"] = vocab_size;
  j["num_classes"] = num_classes;
  j["seed"] = seed;
  j["field"] = field;
  j["coupling"] = coupling;
  return j.dump();  // nlohmann objects iterate in sorted key order
}

GridSpec GridSpec::from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw std::runtime_error(std::string("GridSpec: invalid JSON: ") + e.what());
  }
  GridSpec spec;
  try {
    spec.height = j.at("height").get<int>();
    spec.width = j.at("width").get<int>();
    spec.vocab_size = j.at("vocab_size").get<int>();
    spec.num_classes = j.at("num_classes").get<int>();
    spec.seed = j.at("seed").get<uint64_t>();
    spec.field = j.at("field").get<std::vector<std::vector<double>>>();
    spec.coupling = j.at("coupling").get<std::vector<std::vector<double>>>();
  } catch (const json::exception& e) {
    throw std::runtime_error(std::string("GridSpec: missing or mistyped key: ") + e.what());
  }
  spec.validate();
  return spec;
}

uint64_t GridSpec::fingerprint() const { return fnv1a64(canonical_json()); }

void GridSpec::save(const std::string& path) const {
  validate();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for writing: " + path);
  os << canonical_json() << "\n";
  if (!os) throw std::runtime_error("write failed: " + path);
}

GridSpec GridSpec::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open: " + path);
  std::stringstream buf;
  buf << is.rdbuf();
  return from_json_text(buf.str());
}

GridSpec make_grid_spec(int height, int width, int vocab_size, int num_classes,
                        uint64_t seed, double field_scale, double coupling_scale) {
  GridSpec spec;
  spec.height = height;
  spec.width = width;
  spec.vocab_size = vocab_size;
  spec.num_classes = num_classes;
  spec.seed = seed;
  Rng rng = derive_rng(seed, "gridspec.tables");
  spec.field.assign(num_classes, std::vector<double>(vocab_size, 0.0));
  spec.coupling.assign(num_classes, std::vector<double>(size_t(vocab_size) * vocab_size, 0.0));
  for (int c = 0; c < num_classes; ++c)
    for (int v = 0; v < vocab_size; ++v) spec.field[c][v] = field_scale * rng.next_gauss();
  // Symmetric pair energies: the table is drawn on a <= b and mirrored.
  for (int c = 0; c < num_classes; ++c)
    for (int a = 0; a < vocab_size; ++a)
      for (int b = a; b < vocab_size; ++b) {
        double v = coupling_scale * rng.next_gauss();
        spec.coupling[c][size_t(a) * vocab_size + b] = v;
        spec.coupling[c][size_t(b) * vocab_size + a] = v;
      }
  spec.validate();
  return spec;
}

namespace {
constexpr char kShardMagic[8] = {'R', 'A', 'R', 'S', 'H', 'A', 'R', 'D'};
constexpr uint32_t kShardVersion = 1;
}  // namespace

void save_shard(const std::string& path, const DatasetShard& shard) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for writing: " + path);
  os.write(kShardMagic, 8);
  write_u32(os, kShardVersion);
  write_u32(os, static_cast<uint32_t>(shard.height));
  write_u32(os, static_cast<uint32_t>(shard.width));
  write_u32(os, static_cast<uint32_t>(shard.vocab_size));
  write_u32(os, static_cast<uint32_t>(shard.num_classes));
  write_u64(os, shard.fingerprint);
  write_u64(os, shard.grids.size());
  const size_t cells = size_t(shard.height) * shard.width;
  for (const auto& g : shard.grids) {
    if (g.tokens.size() != cells) throw std::invalid_argument("save_shard: grid shape mismatch");
    if (g.label < 0 || g.label >= shard.num_classes)
      throw std::invalid_argument("save_shard: label out of range");
    write_u32(os, static_cast<uint32_t>(g.label));
    for (uint16_t t : g.tokens) {
      if (t >= shard.vocab_size) throw std::invalid_argument("save_shard: token out of range");
      write_u16(os, t);
    }
  }
  if (!os) throw std::runtime_error("write failed: " + path);
}

DatasetShard load_shard(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open: " + path);
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kShardMagic, 8) != 0)
    throw std::runtime_error(path + ": not a dataset shard");
  uint32_t version = read_u32(is);
  if (version != kShardVersion)
    throw std::runtime_error(path + ": unsupported shard version " + std::to_string(version));
  DatasetShard shard;
  shard.height = static_cast<int>(read_u32(is));
  shard.width = static_cast<int>(read_u32(is));
  shard.vocab_size = static_cast<int>(read_u32(is));
  shard.num_classes = static_cast<int>(read_u32(is));
  if (shard.height < 1 || shard.width < 1 || shard.height > 65535 || shard.width > 65535 ||
      shard.vocab_size < 2 || shard.vocab_size > 65535 || shard.num_classes < 1)
    throw std::runtime_error(path + ": implausible shard header");
  shard.fingerprint = read_u64(is);
  uint64_t count = read_u64(is);
  if (count > (uint64_t(1) << 32)) throw std::runtime_error(path + ": implausible grid count");
  const size_t cells = size_t(shard.height) * shard.width;
  shard.grids.resize(count);
  for (auto& g : shard.grids) {
    g.height = shard.height;
    g.width = shard.width;
    uint32_t label = read_u32(is);
    if (label >= static_cast<uint32_t>(shard.num_classes))
      throw std::runtime_error(path + ": label out of range");
    g.label = static_cast<int>(label);
    g.tokens.resize(cells);
    for (auto& t : g.tokens) {
      t = read_u16(is);
      if (t >= shard.vocab_size) throw std::runtime_error(path + ": token out of range");
    }
  }
  if (is.peek() != EOF) throw std::runtime_error(path + ": trailing bytes after last grid");
  return shard;
}

int draw_categorical(Rng& rng, std::span<const double> probs) {
  if (probs.empty()) throw std::invalid_argument("draw_categorical: empty distribution");
  double u = rng.next_double();
  double cum = 0.0;
  int last_positive = -1;
  for (size_t i = 0; i < probs.size(); ++i) {
    double p = probs[i];
    if (p < 0.0 || !std::isfinite(p))
      throw std::invalid_argument("draw_categorical: invalid probability");
    if (p > 0.0) last_positive = static_cast<int>(i);
    cum += p;
    if (u < cum) return static_cast<int>(i);
  }
  if (last_positive < 0) throw std::invalid_argument("draw_categorical: all-zero distribution");
  return last_positive;  // u landed in rounding slack past the final bucket
}

// Per-class suffix tables of the raster boundary DP. suffix[t][s] is the log
// partition of all completions from cell t onward given boundary state s,
// where s encodes the previous W cell values, most recent in the low digit.
struct PottsModel::DpTables {
  std::vector<std::vector<double>> suffix;  // (cells+1) levels, each V^W wide
};

double PottsModel::enumeration_bits(const GridSpec& spec) {
  return spec.cells() * std::log2(double(spec.vocab_size));
}

PottsModel::~PottsModel() = default;
PottsModel::PottsModel(PottsModel&&) noexcept = default;
PottsModel& PottsModel::operator=(PottsModel&&) noexcept = default;

PottsModel::PottsModel(GridSpec spec) : spec_(std::move(spec)) {
  spec_.validate();
  const int V = spec_.vocab_size, W = spec_.width, N = spec_.cells();
  enum_ok_ = enumeration_bits(spec_) <= kMaxEnumerationBits + 1e-9;

  double states = std::pow(double(V), double(W));
  dp_ok_ = states * (N + 1) <= double(kMaxDpEntries);
  if (dp_ok_) {
    dp_states_ = 1;
    for (int k = 0; k < W; ++k) dp_states_ *= V;
  }

  if (dp_ok_) {
    dp_.resize(spec_.num_classes);
    for (int c = 0; c < spec_.num_classes; ++c) {
      auto tables = std::make_unique<DpTables>();
      auto& suffix = tables->suffix;
      suffix.assign(N + 1, std::vector<double>(dp_states_, 0.0));
      const int64_t keep = dp_states_ / V;  // V^(W-1)
      const auto& field = spec_.field[c];
      const auto& coupling = spec_.coupling[c];
      std::vector<double> terms(V);
      for (int t = N - 1; t >= 0; --t) {
        const int row = t / W, col = t % W;
        for (int64_t s = 0; s < dp_states_; ++s) {
          const int last = static_cast<int>(s % V);
          const int up = static_cast<int>(s / keep);
          double m = -std::numeric_limits<double>::infinity();
          for (int v = 0; v < V; ++v) {
            double local = field[v];
            if (col > 0) local += coupling[size_t(last) * V + v];
            if (row > 0) local += coupling[size_t(up) * V + v];
            int64_t next = (s % keep) * V + v;
            terms[v] = local + suffix[t + 1][next];
            m = std::max(m, terms[v]);
          }
          double acc = 0.0;
          for (int v = 0; v < V; ++v) acc += std::exp(terms[v] - m);
          suffix[t][s] = m + std::log(acc);
        }
      }
      dp_[c] = std::move(tables);
    }
  }

  log_z_enum_.assign(spec_.num_classes, std::numeric_limits<double>::quiet_NaN());
  if (enum_ok_)
    for (int c = 0; c < spec_.num_classes; ++c) log_z_enum_[c] = log_z_enumeration(c);
}

void PottsModel::require_label(int label) const {
  if (label < 0 || label >= spec_.num_classes)
    throw std::invalid_argument("PottsModel: label out of range");
}

const PottsModel::DpTables& PottsModel::dp(int label) const {
  if (!dp_ok_) throw std::runtime_error("PottsModel: boundary DP unavailable for this grid size");
  return *dp_[label];
}

double PottsModel::energy(int label, std::span<const uint16_t> tokens) const {
  require_label(label);
  const int H = spec_.height, W = spec_.width, V = spec_.vocab_size;
  if (static_cast<int>(tokens.size()) != H * W)
    throw std::invalid_argument("PottsModel::energy: token count mismatch");
  const auto& field = spec_.field[label];
  const auto& coupling = spec_.coupling[label];
  double e = 0.0;
  for (uint16_t t : tokens) {
    if (t >= V) throw std::invalid_argument("PottsModel::energy: token out of range");
    e += field[t];
  }
  for (int r = 0; r < H; ++r)
    for (int c = 0; c + 1 < W; ++c)
      e += coupling[size_t(tokens[r * W + c]) * V + tokens[r * W + c + 1]];
  for (int r = 0; r + 1 < H; ++r)
    for (int c = 0; c < W; ++c)
      e += coupling[size_t(tokens[r * W + c]) * V + tokens[(r + 1) * W + c]];
  return e;
}

namespace {

// Upper bound on the energy of any assignment, used to keep exp() in range.
double energy_upper_bound(const GridSpec& spec, int label) {
  const auto& field = spec.field[label];
  const auto& coupling = spec.coupling[label];
  double fmax = *std::max_element(field.begin(), field.end());
  double cmax = *std::max_element(coupling.begin(), coupling.end());
  int pairs = spec.height * (spec.width - 1) + (spec.height - 1) * spec.width;
  return spec.cells() * fmax + pairs * cmax;
}

// Odometer over assignments of `free_cells` within cfg; calls visit(cfg) for
// every combination. cfg must already hold the fixed cells.
template <typename F>
void for_each_completion(std::vector<uint16_t>& cfg, const std::vector<int>& free_cells, int V,
                         F&& visit) {
  for (int cell : free_cells) cfg[cell] = 0;
  while (true) {
    visit(cfg);
    int k = 0;
    for (; k < static_cast<int>(free_cells.size()); ++k) {
      int cell = free_cells[k];
      if (++cfg[cell] < V) break;
      cfg[cell] = 0;
    }
    if (k == static_cast<int>(free_cells.size())) return;
  }
}

}  // namespace

double PottsModel::log_z_enumeration(int label) const {
  require_label(label);
  if (!enum_ok_) throw std::runtime_error("PottsModel: grid too large for enumeration");
  if (!log_z_enum_.empty() && !std::isnan(log_z_enum_[label])) return log_z_enum_[label];
  const int N = spec_.cells();
  std::vector<int> cells(N);
  for (int i = 0; i < N; ++i) cells[i] = i;
  std::vector<uint16_t> cfg(N, 0);
  const double ref = energy_upper_bound(spec_, label);
  double acc = 0.0;
  for_each_completion(cfg, cells, spec_.vocab_size,
                      [&](const std::vector<uint16_t>& x) { acc += std::exp(energy(label, x) - ref); });
  return std::log(acc) + ref;
}

double PottsModel::log_z_dp(int label) const {
  require_label(label);
  return dp(label).suffix[0][0];
}

double PottsModel::log_z(int label) const {
  require_label(label);
  if (dp_ok_) return log_z_dp(label);
  return log_z_enumeration(label);
}

double PottsModel::log_prob(int label, std::span<const uint16_t> tokens) const {
  return energy(label, tokens) - log_z(label);
}

double PottsModel::entropy_per_cell(int label) const {
  require_label(label);
  if (!enum_ok_) throw std::runtime_error("PottsModel: grid too large for enumeration");
  const int N = spec_.cells();
  std::vector<int> cells(N);
  for (int i = 0; i < N; ++i) cells[i] = i;
  std::vector<uint16_t> cfg(N, 0);
  const double ref = energy_upper_bound(spec_, label);
  double acc = 0.0, acc_e = 0.0;
  for_each_completion(cfg, cells, spec_.vocab_size, [&](const std::vector<uint16_t>& x) {
    double e = energy(label, x);
    double w = std::exp(e - ref);
    acc += w;
    acc_e += w * e;
  });
  double log_zv = std::log(acc) + ref;
  return (log_zv - acc_e / acc) / N;
}

std::vector<double> PottsModel::exact_conditional(int label, std::span<const int> observed_cells,
                                                  std::span<const uint16_t> observed_values,
                                                  int target_cell) const {
  require_label(label);
  if (!enum_ok_) throw std::runtime_error("PottsModel: grid too large for enumeration");
  if (observed_cells.size() != observed_values.size())
    throw std::invalid_argument("exact_conditional: observed lists differ in length");
  const int N = spec_.cells(), V = spec_.vocab_size;
  if (target_cell < 0 || target_cell >= N)
    throw std::invalid_argument("exact_conditional: target cell out of range");
  std::vector<char> fixed(N, 0);
  std::vector<uint16_t> cfg(N, 0);
  for (size_t i = 0; i < observed_cells.size(); ++i) {
    int cell = observed_cells[i];
    if (cell < 0 || cell >= N) throw std::invalid_argument("exact_conditional: cell out of range");
    if (fixed[cell]) throw std::invalid_argument("exact_conditional: cell observed twice");
    if (observed_values[i] >= V)
      throw std::invalid_argument("exact_conditional: observed token out of range");
    fixed[cell] = 1;
    cfg[cell] = observed_values[i];
  }
  if (fixed[target_cell]) throw std::invalid_argument("exact_conditional: target already observed");
  std::vector<int> free_cells;
  for (int i = 0; i < N; ++i)
    if (!fixed[i] && i != target_cell) free_cells.push_back(i);
  const double ref = energy_upper_bound(spec_, label);
  std::vector<double> acc(V, 0.0);
  for (int v = 0; v < V; ++v) {
    cfg[target_cell] = static_cast<uint16_t>(v);
    for_each_completion(cfg, free_cells, V, [&](const std::vector<uint16_t>& x) {
      acc[v] += std::exp(energy(label, x) - ref);
    });
  }
  double total = 0.0;
  for (double a : acc) total += a;
  if (total <= 0.0) throw std::runtime_error("exact_conditional: vanishing normalizer");
  for (double& a : acc) a /= total;
  return acc;
}

std::vector<double> PottsModel::raster_conditional(int label,
                                                   std::span<const uint16_t> prefix) const {
  require_label(label);
  const auto& tables = dp(label);
  const int V = spec_.vocab_size, W = spec_.width, N = spec_.cells();
  const int t = static_cast<int>(prefix.size());
  if (t >= N) throw std::invalid_argument("raster_conditional: prefix covers the whole grid");
  const int64_t keep = dp_states_ / V;
  int64_t s = 0;
  for (uint16_t tok : prefix) {
    if (tok >= V) throw std::invalid_argument("raster_conditional: token out of range");
    s = (s % keep) * V + tok;
  }
  const int row = t / W, col = t % W;
  const auto& field = spec_.field[label];
  const auto& coupling = spec_.coupling[label];
  const int last = static_cast<int>(s % V);
  const int up = static_cast<int>(s / keep);
  std::vector<double> logits(V);
  double m = -std::numeric_limits<double>::infinity();
  for (int v = 0; v < V; ++v) {
    double local = field[v];
    if (col > 0) local += coupling[size_t(last) * V + v];
    if (row > 0) local += coupling[size_t(up) * V + v];
    logits[v] = local + tables.suffix[t + 1][(s % keep) * V + v];
    m = std::max(m, logits[v]);
  }
  double total = 0.0;
  for (int v = 0; v < V; ++v) {
    logits[v] = std::exp(logits[v] - m);
    total += logits[v];
  }
  for (int v = 0; v < V; ++v) logits[v] /= total;
  return logits;
}

TokenGrid PottsModel::sample(int label, Rng& rng, bool* approximate) const {
  require_label(label);
  const int H = spec_.height, W = spec_.width, V = spec_.vocab_size, N = spec_.cells();
  TokenGrid grid;
  grid.height = H;
  grid.width = W;
  grid.label = label;
  grid.tokens.resize(N);
  if (dp_ok_) {
    if (approximate) *approximate = false;
    std::vector<uint16_t> prefix;
    prefix.reserve(N);
    for (int t = 0; t < N; ++t) {
      std::vector<double> probs = raster_conditional(label, prefix);
      uint16_t v = static_cast<uint16_t>(draw_categorical(rng, probs));
      grid.tokens[t] = v;
      prefix.push_back(v);
    }
    return grid;
  }
  // Fallback: uniform init plus one systematic Gibbs sweep. Cheap and biased;
  // callers see the flag and must not treat the output as an exact sample.
  if (approximate) *approximate = true;
  for (int t = 0; t < N; ++t)
    grid.tokens[t] = static_cast<uint16_t>(rng.next_below(static_cast<uint64_t>(V)));
  const auto& field = spec_.field[label];
  const auto& coupling = spec_.coupling[label];
  std::vector<double> logits(V), probs(V);
  for (int t = 0; t < N; ++t) {
    const int r = t / W, c = t % W;
    double m = -std::numeric_limits<double>::infinity();
    for (int v = 0; v < V; ++v) {
      double local = field[v];
      if (c > 0) local += coupling[size_t(grid.tokens[t - 1]) * V + v];
      if (c + 1 < W) local += coupling[size_t(v) * V + grid.tokens[t + 1]];
      if (r > 0) local += coupling[size_t(grid.tokens[t - W]) * V + v];
      if (r + 1 < H) local += coupling[size_t(v) * V + grid.tokens[t + W]];
      logits[v] = local;
      m = std::max(m, local);
    }
    double total = 0.0;
    for (int v = 0; v < V; ++v) {
      probs[v] = std::exp(logits[v] - m);
      total += probs[v];
    }
    for (int v = 0; v < V; ++v) probs[v] /= total;
    grid.tokens[t] = static_cast<uint16_t>(draw_categorical(rng, probs));
  }
  return grid;
}

DatasetShard generate_shard(const PottsModel& model, int count, uint64_t seed,
                            const std::string& stream_name) {
  if (count < 0) throw std::invalid_argument("generate_shard: negative count");
  const GridSpec& spec = model.spec();
  DatasetShard shard;
  shard.height = spec.height;
  shard.width = spec.width;
  shard.vocab_size = spec.vocab_size;
  shard.num_classes = spec.num_classes;
  shard.fingerprint = spec.fingerprint();
  shard.grids.reserve(count);
  for (int i = 0; i < count; ++i) {
    Rng rng = derive_rng(seed, stream_name, static_cast<uint64_t>(i));
    bool approx = false;
    shard.grids.push_back(model.sample(i % spec.num_classes, rng, &approx));
    shard.approximate = shard.approximate || approx;
  }
  return shard;
}

}  // namespace rar
