#include "ex2l/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace ex2l {

namespace {

constexpr std::size_t kImg = 28;

// ---- glyph drawing -----------------------------------------------------

void put(NDArray& plane, int r, int c, double v) {
  if (r >= 0 && r < static_cast<int>(kImg) && c >= 0 && c < static_cast<int>(kImg))
    plane.at2(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) = v;
}

// 28x28 glyph mask for one of the 10 templates, jittered by (dy, dx).
NDArray draw_glyph(int tpl, int dy, int dx, double v) {
  NDArray m({kImg, kImg});
  int cy = 14 + dy, cx = 14 + dx;
  switch (tpl) {
    case 0:  // filled square
      for (int r = -5; r <= 5; ++r)
        for (int c = -5; c <= 5; ++c) put(m, cy + r, cx + c, v);
      break;
    case 1:  // hollow square
      for (int r = -7; r <= 7; ++r)
        for (int c = -7; c <= 7; ++c)
          if (std::abs(r) >= 5 || std::abs(c) >= 5) put(m, cy + r, cx + c, v);
      break;
    case 2:  // disc
      for (int r = -7; r <= 7; ++r)
        for (int c = -7; c <= 7; ++c)
          if (r * r + c * c <= 36) put(m, cy + r, cx + c, v);
      break;
    case 3:  // ring
      for (int r = -8; r <= 8; ++r)
        for (int c = -8; c <= 8; ++c) {
          int d2 = r * r + c * c;
          if (d2 <= 56 && d2 >= 20) put(m, cy + r, cx + c, v);
        }
      break;
    case 4:  // X cross
      for (int t = -8; t <= 8; ++t)
        for (int w = -1; w <= 1; ++w) {
          put(m, cy + t, cx + t + w, v);
          put(m, cy + t, cx - t + w, v);
        }
      break;
    case 5:  // plus
      for (int t = -8; t <= 8; ++t)
        for (int w = -1; w <= 1; ++w) {
          put(m, cy + w, cx + t, v);
          put(m, cy + t, cx + w, v);
        }
      break;
    case 6:  // horizontal bars
      for (int band = -1; band <= 1; ++band)
        for (int r = -1; r <= 1; ++r)
          for (int c = -8; c <= 8; ++c) put(m, cy + band * 6 + r, cx + c, v);
      break;
    case 7:  // vertical bars
      for (int band = -1; band <= 1; ++band)
        for (int r = -8; r <= 8; ++r)
          for (int c = -1; c <= 1; ++c) put(m, cy + r, cx + band * 6 + c, v);
      break;
    case 8:  // thick diagonal stripe
      for (int t = -9; t <= 9; ++t)
        for (int w = -2; w <= 2; ++w) put(m, cy + t, cx + t + w, v);
      break;
    case 9:  // filled triangle, point up
      for (int r = -7; r <= 7; ++r) {
        int half = (r + 7) / 2 + 1;
        for (int c = -half; c <= half; ++c) put(m, cy + r, cx + c, v);
      }
      break;
    default:
      throw UsageError("draw_glyph: template out of range");
  }
  return m;
}

Example make_colored_glyph(int tpl, double env_corr, double flip_p, Rng& rng,
                           int env) {
  // color tracks the clean base label; the flip then decorrelates it from
  // the emitted label, so P(c==y) = e(1-p) + (1-e)p
  int base = tpl < 5 ? 0 : 1;
  int y = rng.bernoulli(flip_p) ? 1 - base : base;
  int c = rng.bernoulli(env_corr) ? base : 1 - base;
  int dy = static_cast<int>(rng.uniform_index(5)) - 2;
  int dx = static_cast<int>(rng.uniform_index(5)) - 2;
  double v = rng.uniform(0.75, 1.0);
  NDArray glyph = draw_glyph(tpl, dy, dx, v);

  Example ex;
  ex.image = NDArray({3, kImg, kImg});
  for (std::size_t i = 0; i < glyph.numel(); ++i)
    ex.image[static_cast<std::size_t>(c) * kImg * kImg + i] = glyph[i];
  ex.label = y;
  ex.confounder = c;
  ex.group = group_encode(c, y, 2);
  ex.env = env;
  return ex;
}

}  // namespace

std::vector<std::vector<int>> Dataset::group_index() const {
  std::vector<std::vector<int>> idx(n_groups());
  for (std::size_t i = 0; i < examples.size(); ++i)
    idx[examples[i].group].push_back(static_cast<int>(i));
  return idx;
}

std::vector<Example> gen_cmnist_style(std::size_t n, double env_corr,
                                      double flip_p, std::uint64_t seed,
                                      int env) {
  if (n < 1) throw UsageError("gen_cmnist_style: n must be >= 1");
  std::vector<Example> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng = Rng::fork(seed, i);
    int tpl = static_cast<int>(rng.uniform_index(10));
    out.push_back(make_colored_glyph(tpl, env_corr, flip_p, rng, env));
  }
  return out;
}

// ---- IDX -------------------------------------------------------------

namespace {

std::uint32_t read_be32(const std::vector<unsigned char>& buf, std::size_t off,
                        const std::string& path) {
  if (off + 4 > buf.size())
    throw DataError(path + ": truncated at byte offset " + std::to_string(off));
  return (static_cast<std::uint32_t>(buf[off]) << 24) |
         (static_cast<std::uint32_t>(buf[off + 1]) << 16) |
         (static_cast<std::uint32_t>(buf[off + 2]) << 8) |
         static_cast<std::uint32_t>(buf[off + 3]);
}

std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

IdxDigits load_mnist_idx(const std::string& images_path,
                         const std::string& labels_path) {
  auto ibuf = read_file(images_path);
  std::uint32_t magic = read_be32(ibuf, 0, images_path);
  if (magic != 0x00000803)
    throw DataError(images_path + ": bad image magic at byte offset 0 (got 0x" +
                    [&] { char b[16]; std::snprintf(b, 16, "%08x", magic); return std::string(b); }() +
                    ", want 0x00000803)");
  std::size_t n = read_be32(ibuf, 4, images_path);
  std::size_t rows = read_be32(ibuf, 8, images_path);
  std::size_t cols = read_be32(ibuf, 12, images_path);
  if (rows != kImg || cols != kImg)
    throw DataError(images_path + ": expected 28x28 digits, got " +
                    std::to_string(rows) + "x" + std::to_string(cols));
  if (16 + n * rows * cols != ibuf.size())
    throw DataError(images_path + ": truncated at byte offset " +
                    std::to_string(ibuf.size()));

  auto lbuf = read_file(labels_path);
  std::uint32_t lmagic = read_be32(lbuf, 0, labels_path);
  if (lmagic != 0x00000801)
    throw DataError(labels_path + ": bad label magic at byte offset 0");
  std::size_t ln = read_be32(lbuf, 4, labels_path);
  if (ln != n) throw DataError(labels_path + ": label/image count mismatch");
  if (8 + ln != lbuf.size())
    throw DataError(labels_path + ": truncated at byte offset " +
                    std::to_string(lbuf.size()));

  IdxDigits out;
  out.images.reserve(n);
  out.labels.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    NDArray img({rows, cols});
    const unsigned char* src = ibuf.data() + 16 + i * rows * cols;
    for (std::size_t p = 0; p < rows * cols; ++p)
      img[p] = static_cast<double>(src[p]) / 255.0;
    out.images.push_back(std::move(img));
    int lab = lbuf[8 + i];
    if (lab > 9) throw DataError(labels_path + ": label out of range at index " +
                                 std::to_string(i));
    out.labels.push_back(lab);
  }
  return out;
}

std::vector<Example> colorize_digits(const IdxDigits& digits, double env_corr,
                                     double flip_p, std::uint64_t seed, int env) {
  if (digits.images.empty()) throw DataError("colorize_digits: empty digit set");
  std::vector<Example> out;
  out.reserve(digits.images.size());
  for (std::size_t i = 0; i < digits.images.size(); ++i) {
    Rng rng = Rng::fork(seed, i);
    int base = digits.labels[i] < 5 ? 0 : 1;
    int y = rng.bernoulli(flip_p) ? 1 - base : base;
    int c = rng.bernoulli(env_corr) ? base : 1 - base;
    Example ex;
    ex.image = NDArray({3, kImg, kImg});
    const NDArray& g = digits.images[i];
    for (std::size_t p = 0; p < g.numel(); ++p)
      ex.image[static_cast<std::size_t>(c) * kImg * kImg + p] = g[p];
    ex.label = y;
    ex.confounder = c;
    ex.group = group_encode(c, y, 2);
    ex.env = env;
    out.push_back(std::move(ex));
  }
  return out;
}

// ---- group tables -------------------------------------------------------

std::vector<int> GroupTable::env_ids() const {
  std::set<int> s;
  for (const auto& r : rows) s.insert(r.env);
  return {s.begin(), s.end()};
}

void GroupTable::validate() const {
  if (rows.empty()) throw DataError("group table: empty");
  std::map<int, double> sums;
  for (const auto& r : rows) {
    if (r.proportion < 0.0) throw DataError("group table: negative proportion");
    if (r.label < 0 || r.label >= n_labels || r.confounder < 0 ||
        r.confounder >= n_confounders)
      throw DataError("group table: label/confounder out of range");
    sums[r.env] += r.proportion;
  }
  for (const auto& [env, s] : sums)
    if (std::fabs(s - 1.0) > 1e-6)
      throw DataError("group table: environment " + std::to_string(env) +
                      " proportions sum to " + std::to_string(s));
}

GroupTable load_group_table_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  GroupTable t;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (first && line.rfind("env", 0) == 0) {  // header
      first = false;
      continue;
    }
    first = false;
    std::istringstream ls(line);
    std::string cell;
    GroupTableRow r;
    try {
      std::getline(ls, cell, ',');
      r.env = std::stoi(cell);
      std::getline(ls, cell, ',');
      r.confounder = std::stoi(cell);
      std::getline(ls, cell, ',');
      r.label = std::stoi(cell);
      std::getline(ls, cell, ',');
      r.proportion = std::stod(cell);
    } catch (const std::exception&) {
      throw DataError(path + ": malformed row: " + line);
    }
    t.rows.push_back(r);
    t.n_labels = std::max(t.n_labels, r.label + 1);
    t.n_confounders = std::max(t.n_confounders, r.confounder + 1);
  }
  if (t.rows.empty()) throw DataError(path + ": no rows");

  // published tables round to 0.01%; renormalize small drift, reject worse
  std::map<int, double> sums;
  for (const auto& r : t.rows) sums[r.env] += r.proportion;
  for (const auto& [env, s] : sums) {
    if (std::fabs(s - 1.0) > 1e-3)
      throw DataError(path + ": environment " + std::to_string(env) +
                      " proportions sum to " + std::to_string(s));
  }
  for (auto& r : t.rows) r.proportion /= sums[r.env];
  t.validate();
  return t;
}

void save_group_table_csv(const GroupTable& table, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open " + path);
  out << "env,confounder,label,proportion\n";
  char buf[64];
  for (const auto& r : table.rows) {
    std::snprintf(buf, sizeof(buf), "%d,%d,%d,%.6f\n", r.env, r.confounder,
                  r.label, r.proportion);
    out << buf;
  }
}

namespace {

GroupTable normalized(GroupTable t) {
  std::map<int, double> sums;
  for (const auto& r : t.rows) sums[r.env] += r.proportion;
  for (auto& r : t.rows) r.proportion /= sums[r.env];
  t.validate();
  return t;
}

}  // namespace

GroupTable builtin_waterbirds_table() {
  // land/water-style skew: env 0 land-centric, env 1 balanced;
  // confounder 0 = land, 1 = water; label 0 = landbird, 1 = waterbird
  GroupTable t;
  t.rows = {
      {0, 0, 1, 0.0826}, {0, 0, 0, 0.6180}, {0, 1, 1, 0.1158}, {0, 1, 0, 0.1837},
      {1, 0, 1, 0.0598}, {1, 0, 0, 0.4477}, {1, 1, 1, 0.1905}, {1, 1, 0, 0.3020},
  };
  return normalized(std::move(t));
}

GroupTable builtin_celeba_table() {
  // demographic-style skew; confounder 0 = male, 1 = female;
  // label 0 = non-blonde, 1 = blonde
  GroupTable t;
  t.rows = {
      {0, 0, 1, 0.0108}, {0, 0, 0, 0.4694}, {0, 1, 1, 0.1020}, {0, 1, 0, 0.4177},
      {1, 0, 1, 0.0066}, {1, 0, 0, 0.3519}, {1, 1, 1, 0.1736}, {1, 1, 0, 0.4679},
  };
  return normalized(std::move(t));
}

GroupTable uniform_group_table(int n_labels, int n_confounders, int env) {
  GroupTable t;
  t.n_labels = n_labels;
  t.n_confounders = n_confounders;
  double p = 1.0 / (n_labels * n_confounders);
  for (int c = 0; c < n_confounders; ++c)
    for (int y = 0; y < n_labels; ++y) t.rows.push_back({env, c, y, p});
  t.validate();
  return t;
}

namespace {

// glyph family by label, background texture by confounder
Example make_textured_glyph(int label, int conf, Rng& rng, int env) {
  Example ex;
  ex.image = NDArray({3, kImg, kImg});
  // background: confounder 0 -> horizontal stripes, 1 -> checkerboard
  double bg = rng.uniform(0.18, 0.30);
  for (std::size_t r = 0; r < kImg; ++r)
    for (std::size_t c = 0; c < kImg; ++c) {
      bool on = conf == 0 ? (r / 3) % 2 == 0 : ((r / 3) + (c / 3)) % 2 == 0;
      if (!on) continue;
      for (std::size_t ch = 0; ch < 3; ++ch)
        ex.image[(ch * kImg + r) * kImg + c] = bg;
    }
  // glyph family: label 0 -> triangle-ish (tpl 9, 8), label 1 -> round (2, 3)
  int tpl = label == 0 ? (rng.bernoulli(0.5) ? 9 : 8) : (rng.bernoulli(0.5) ? 2 : 3);
  int dy = static_cast<int>(rng.uniform_index(5)) - 2;
  int dx = static_cast<int>(rng.uniform_index(5)) - 2;
  double v = rng.uniform(0.8, 1.0);
  NDArray glyph = draw_glyph(tpl, dy, dx, v);
  for (std::size_t r = 0; r < kImg; ++r)
    for (std::size_t c = 0; c < kImg; ++c) {
      double g = glyph.at2(r, c);
      if (g <= 0.0) continue;
      for (std::size_t ch = 0; ch < 3; ++ch)
        ex.image[(ch * kImg + r) * kImg + c] = g;
    }
  ex.label = label;
  ex.confounder = conf;
  ex.group = group_encode(conf, label, 2);
  ex.env = env;
  return ex;
}

}  // namespace

std::vector<Example> gen_from_group_table(const GroupTable& table,
                                          std::size_t n_per_env,
                                          std::uint64_t seed) {
  table.validate();
  if (table.n_labels != 2 || table.n_confounders != 2)
    throw ConfigError("gen_from_group_table: only 2x2 group tables are synthesizable");
  std::vector<Example> out;
  for (int env : table.env_ids()) {
    std::vector<GroupTableRow> env_rows;
    for (const auto& r : table.rows)
      if (r.env == env) env_rows.push_back(r);
    for (std::size_t i = 0; i < n_per_env; ++i) {
      Rng rng = Rng::fork(seed, (static_cast<std::uint64_t>(env) << 40) | i);
      double u = rng.uniform();
      double acc = 0.0;
      const GroupTableRow* pick = &env_rows.back();
      for (const auto& r : env_rows) {
        acc += r.proportion;
        if (u < acc) {
          pick = &r;
          break;
        }
      }
      out.push_back(make_textured_glyph(pick->label, pick->confounder, rng, env));
    }
  }
  return out;
}

// ---- samplers -------------------------------------------------------------

Sampler::Sampler(Kind kind, const Dataset& data, std::size_t batch_size,
                 std::uint64_t seed)
    : kind_(kind), n_(data.size()), batch_(batch_size), rng_(seed) {
  if (batch_size < 1) throw UsageError("sampler: batch size must be >= 1");
  if (n_ == 0) throw DataError("sampler: empty dataset");
  if (kind == Kind::UniformGroup) {
    for (auto& g : data.group_index())
      if (!g.empty()) groups_.push_back(g);
    if (groups_.empty()) throw DataError("sampler: all groups empty");
  }
}

std::vector<int> Sampler::next_batch() {
  std::vector<int> idx(batch_);
  if (kind_ == Kind::Random) {
    for (auto& i : idx) i = static_cast<int>(rng_.uniform_index(n_));
  } else {
    for (auto& i : idx) {
      const auto& g = groups_[rng_.uniform_index(groups_.size())];
      i = g[rng_.uniform_index(g.size())];
    }
  }
  return idx;
}

Batch make_batch(const Dataset& data, const std::vector<int>& indices) {
  if (indices.empty()) throw UsageError("make_batch: empty index list");
  const auto& shape = data.examples.front().image.shape();
  Batch b;
  b.images = NDArray({indices.size(), shape[0], shape[1], shape[2]});
  std::size_t sz = data.examples.front().image.numel();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const Example& ex = data.examples.at(indices[i]);
    std::memcpy(b.images.data() + i * sz, ex.image.data(), sz * sizeof(double));
    b.labels.push_back(ex.label);
    b.confounders.push_back(ex.confounder);
    b.groups.push_back(ex.group);
  }
  return b;
}

}  // namespace ex2l
