#include "ms2d/scan_catalog.hpp"

#include <algorithm>
#include <sstream>
#include <stdexcept>

namespace ms2d {

std::string to_string(ScanId d) { return "S" + std::to_string(static_cast<int>(d)); }

ScanId scan_id_from_string(const std::string& s) {
  if (s.size() >= 2 && (s[0] == 'S' || s[0] == 's')) {
    int v = std::stoi(s.substr(1));
    if (v >= 1 && v <= kNumScans) return static_cast<ScanId>(v);
  }
  throw std::invalid_argument("unknown scan id: " + s);
}

std::array<ScanId, kNumScans> all_scan_ids() {
  std::array<ScanId, kNumScans> ids{};
  for (int i = 0; i < kNumScans; ++i) ids[static_cast<std::size_t>(i)] = static_cast<ScanId>(i + 1);
  return ids;
}

namespace {

void check_shape(GridShape g) {
  if (g.rows < 1 || g.cols < 1) throw std::invalid_argument("GridShape: rows and cols must be >= 1");
}

std::vector<std::int64_t> row_raster(GridShape g) {
  std::vector<std::int64_t> order(static_cast<std::size_t>(g.length()));
  for (std::int64_t i = 0; i < g.length(); ++i) order[static_cast<std::size_t>(i)] = i;
  return order;
}

std::vector<std::int64_t> col_raster(GridShape g) {
  std::vector<std::int64_t> order;
  order.reserve(static_cast<std::size_t>(g.length()));
  for (std::int64_t c = 0; c < g.cols; ++c)
    for (std::int64_t r = 0; r < g.rows; ++r) order.push_back(r * g.cols + c);
  return order;
}

// Anti-diagonals d = r + c ascending; row ascending within each diagonal.
std::vector<std::int64_t> anti_diagonal(GridShape g) {
  std::vector<std::int64_t> order;
  order.reserve(static_cast<std::size_t>(g.length()));
  for (std::int64_t d = 0; d <= g.rows + g.cols - 2; ++d) {
    const std::int64_t r_lo = std::max<std::int64_t>(0, d - g.cols + 1);
    const std::int64_t r_hi = std::min<std::int64_t>(g.rows - 1, d);
    for (std::int64_t r = r_lo; r <= r_hi; ++r) order.push_back(r * g.cols + (d - r));
  }
  return order;
}

// Main diagonals d = r - c + W - 1 ascending; row ascending within each.
std::vector<std::int64_t> main_diagonal(GridShape g) {
  std::vector<std::int64_t> order;
  order.reserve(static_cast<std::size_t>(g.length()));
  for (std::int64_t d = 0; d <= g.rows + g.cols - 2; ++d) {
    const std::int64_t r_lo = std::max<std::int64_t>(0, d - g.cols + 1);
    const std::int64_t r_hi = std::min<std::int64_t>(g.rows - 1, d);
    for (std::int64_t r = r_lo; r <= r_hi; ++r) order.push_back(r * g.cols + (r - d + g.cols - 1));
  }
  return order;
}

// Even rows left->right, odd rows right->left.
std::vector<std::int64_t> horizontal_serpentine(GridShape g) {
  std::vector<std::int64_t> order;
  order.reserve(static_cast<std::size_t>(g.length()));
  for (std::int64_t r = 0; r < g.rows; ++r) {
    if (r % 2 == 0)
      for (std::int64_t c = 0; c < g.cols; ++c) order.push_back(r * g.cols + c);
    else
      for (std::int64_t c = g.cols - 1; c >= 0; --c) order.push_back(r * g.cols + c);
  }
  return order;
}

// Even columns top->bottom, odd columns bottom->top.
std::vector<std::int64_t> vertical_serpentine(GridShape g) {
  std::vector<std::int64_t> order;
  order.reserve(static_cast<std::size_t>(g.length()));
  for (std::int64_t c = 0; c < g.cols; ++c) {
    if (c % 2 == 0)
      for (std::int64_t r = 0; r < g.rows; ++r) order.push_back(r * g.cols + c);
    else
      for (std::int64_t r = g.rows - 1; r >= 0; --r) order.push_back(r * g.cols + c);
  }
  return order;
}

std::vector<std::int64_t> invert(const std::vector<std::int64_t>& order) {
  std::vector<std::int64_t> inv(order.size());
  for (std::size_t t = 0; t < order.size(); ++t) inv[static_cast<std::size_t>(order[t])] = static_cast<std::int64_t>(t);
  return inv;
}

}  // namespace

ScanPermutation path_order(ScanId d, GridShape shape) {
  check_shape(shape);
  std::vector<std::int64_t> order;
  switch (d) {
    case ScanId::S1: order = row_raster(shape); break;
    case ScanId::S2: order = col_raster(shape); break;
    case ScanId::S3: order = row_raster(shape); std::reverse(order.begin(), order.end()); break;
    case ScanId::S4: order = col_raster(shape); std::reverse(order.begin(), order.end()); break;
    case ScanId::S5: order = anti_diagonal(shape); break;
    case ScanId::S6: order = anti_diagonal(shape); std::reverse(order.begin(), order.end()); break;
    case ScanId::S7: order = main_diagonal(shape); break;
    case ScanId::S8: order = main_diagonal(shape); std::reverse(order.begin(), order.end()); break;
    case ScanId::S9: order = horizontal_serpentine(shape); break;
    case ScanId::S10: order = horizontal_serpentine(shape); std::reverse(order.begin(), order.end()); break;
    case ScanId::S11: order = vertical_serpentine(shape); break;
    case ScanId::S12: order = vertical_serpentine(shape); std::reverse(order.begin(), order.end()); break;
  }
  ScanPermutation p;
  p.shape = shape;
  p.inverse = invert(order);
  p.order = std::move(order);
  return p;
}

ScanPermutation inverse_order(const ScanPermutation& p) {
  ScanPermutation q;
  q.shape = p.shape;
  q.order = p.inverse;
  q.inverse = p.order;
  return q;
}

Tensor serialize(const Tensor& v, const ScanPermutation& p) {
  if (v.rank() != 3 || v.dim(0) != p.shape.rows || v.dim(1) != p.shape.cols) {
    throw std::invalid_argument("serialize: feature map shape " + v.shape_str() + " does not match grid " +
                                std::to_string(p.shape.rows) + "x" + std::to_string(p.shape.cols));
  }
  const std::int64_t L = p.shape.length();
  const std::int64_t C = v.dim(2);
  Tensor s({L, C});
  for (std::int64_t t = 0; t < L; ++t) {
    const std::int64_t src = p.order[static_cast<std::size_t>(t)];
    for (std::int64_t c = 0; c < C; ++c) s(t, c) = v[src * C + c];
  }
  return s;
}

Tensor deserialize(const Tensor& s, const ScanPermutation& p) {
  const std::int64_t L = p.shape.length();
  if (s.rank() != 2 || s.dim(0) != L) {
    throw std::invalid_argument("deserialize: sequence shape " + s.shape_str() + " does not match grid length " +
                                std::to_string(L));
  }
  const std::int64_t C = s.dim(1);
  Tensor v({p.shape.rows, p.shape.cols, C});
  for (std::int64_t t = 0; t < L; ++t) {
    const std::int64_t dst = p.order[static_cast<std::size_t>(t)];
    for (std::int64_t c = 0; c < C; ++c) v[dst * C + c] = s(t, c);
  }
  return v;
}

ExperimentConfig experiment_streams(int id) {
  if (id < 1 || id > kNumExperiments) {
    throw std::invalid_argument("experiment id must be in 1..21, got " + std::to_string(id));
  }
  auto S = [](int i) { return static_cast<ScanId>(i); };
  ExperimentConfig cfg;
  cfg.id = id;
  if (id <= 12) {
    cfg.k = 1;
    cfg.streams = {S(id), S(id), S(id), S(id)};
  } else if (id <= 18) {
    // Complementary pairs, each supplied twice, interleaved.
    cfg.k = 2;
    const int a = 2 * (id - 13) + 1;  // 13->S1+S2, 14->S3+S4, ... 18->S11+S12
    cfg.streams = {S(a), S(a + 1), S(a), S(a + 1)};
  } else {
    cfg.k = 4;
    const int a = 4 * (id - 19) + 1;  // 19->S1..S4, 20->S5..S8, 21->S9..S12
    cfg.streams = {S(a), S(a + 1), S(a + 2), S(a + 3)};
  }
  return cfg;
}

std::string scan_dump_csv(GridShape shape) {
  check_shape(shape);
  std::ostringstream os;
  for (ScanId d : all_scan_ids()) {
    const auto p = path_order(d, shape);
    os << to_string(d);
    for (auto t : p.order) os << "," << t;
    os << "\n";
  }
  return os.str();
}

}  // namespace ms2d
