#include "ms2d/data_pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

#include "ms2d/rng.hpp"

namespace fs = std::filesystem;

namespace ms2d {

void PhantomSpec::validate() const {
  if (n_cases < 1) throw std::invalid_argument("PhantomSpec: n_cases must be >= 1");
  if (grid < 16) throw std::invalid_argument("PhantomSpec: grid must be >= 16");
  if (min_lesions < 1 || max_lesions < min_lesions) throw std::invalid_argument("PhantomSpec: bad lesion count range");
  if (eccentricity < 0.0 || eccentricity >= 1.0) throw std::invalid_argument("PhantomSpec: eccentricity must be in [0,1)");
  if (theta < 0.0 || theta >= M_PI) throw std::invalid_argument("PhantomSpec: theta must be in [0,pi)");
  if (texture_strength < 0.0 || noise_sigma < 0.0 || contrast <= 0.0) {
    throw std::invalid_argument("PhantomSpec: strengths must be nonnegative and contrast positive");
  }
}

Volume minmax_normalize(const Volume& v) {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  bool any_nonzero = false;
  for (std::int64_t i = 0; i < v.slices.size(); ++i) {
    const double x = v.slices[i];
    if (x != 0.0) {
      any_nonzero = true;
      lo = std::min(lo, x);
      hi = std::max(hi, x);
    }
  }
  if (!any_nonzero) throw std::invalid_argument("minmax_normalize: volume has no nonzero voxels");
  Volume out = v;
  if (hi == lo) {
    for (std::int64_t i = 0; i < out.slices.size(); ++i) out.slices[i] = 0.0;
    return out;
  }
  const double range = hi - lo;
  for (std::int64_t i = 0; i < out.slices.size(); ++i) {
    if (out.slices[i] != 0.0) out.slices[i] = (out.slices[i] - lo) / range;
  }
  return out;
}

namespace {

void corner_sample(std::int64_t t, std::int64_t n_in, std::int64_t n_out, std::int64_t& i0, std::int64_t& i1,
                   double& f) {
  const double s = n_out > 1 ? static_cast<double>(n_in - 1) / static_cast<double>(n_out - 1) : 0.0;
  const double src = static_cast<double>(t) * s;
  i0 = static_cast<std::int64_t>(std::floor(src));
  if (i0 > n_in - 1) i0 = n_in - 1;
  i1 = std::min<std::int64_t>(i0 + 1, n_in - 1);
  f = src - static_cast<double>(i0);
}

}  // namespace

Tensor resize_bilinear(const Tensor& slice, std::int64_t out) {
  if (slice.rank() != 3) throw std::invalid_argument("resize_bilinear: expects [C,H,W]");
  if (out < 1) throw std::invalid_argument("resize_bilinear: output size must be >= 1");
  const std::int64_t C = slice.dim(0), H = slice.dim(1), W = slice.dim(2);
  if (H == out && W == out) return slice;
  Tensor r({C, out, out});
  for (std::int64_t ho = 0; ho < out; ++ho) {
    std::int64_t y0, y1;
    double fy;
    corner_sample(ho, H, out, y0, y1, fy);
    for (std::int64_t wo = 0; wo < out; ++wo) {
      std::int64_t x0, x1;
      double fx;
      corner_sample(wo, W, out, x0, x1, fx);
      for (std::int64_t c = 0; c < C; ++c) {
        const double top = (1.0 - fx) * slice(c, y0, x0) + fx * slice(c, y0, x1);
        const double bot = (1.0 - fx) * slice(c, y1, x0) + fx * slice(c, y1, x1);
        r(c, ho, wo) = (1.0 - fy) * top + fy * bot;
      }
    }
  }
  return r;
}

Tensor resize_nearest_mask(const Tensor& mask, std::int64_t out) {
  if (mask.rank() != 2) throw std::invalid_argument("resize_nearest_mask: expects [H,W]");
  const std::int64_t H = mask.dim(0), W = mask.dim(1);
  Tensor r({out, out});
  for (std::int64_t ho = 0; ho < out; ++ho) {
    const double sy = out > 1 ? static_cast<double>(H - 1) / static_cast<double>(out - 1) : 0.0;
    const std::int64_t y = std::min<std::int64_t>(H - 1, static_cast<std::int64_t>(std::llround(ho * sy)));
    for (std::int64_t wo = 0; wo < out; ++wo) {
      const double sx = out > 1 ? static_cast<double>(W - 1) / static_cast<double>(out - 1) : 0.0;
      const std::int64_t x = std::min<std::int64_t>(W - 1, static_cast<std::int64_t>(std::llround(wo * sx)));
      r(ho, wo) = mask(y, x) > 0.5 ? 1.0 : 0.0;
    }
  }
  return r;
}

SplitAssignment subject_split(std::vector<std::string> case_ids, std::uint64_t seed) {
  const std::int64_t n = static_cast<std::int64_t>(case_ids.size());
  if (n < 3) throw std::invalid_argument("subject_split: need at least 3 cases");
  Rng rng(seed);
  rng.shuffle(case_ids);
  const std::int64_t n_val = static_cast<std::int64_t>(std::floor(0.15 * static_cast<double>(n)));
  const std::int64_t n_test = n_val;
  const std::int64_t n_train = n - n_val - n_test;
  SplitAssignment s;
  s.train.assign(case_ids.begin(), case_ids.begin() + n_train);
  s.val.assign(case_ids.begin() + n_train, case_ids.begin() + n_train + n_val);
  s.test.assign(case_ids.begin() + n_train + n_val, case_ids.end());
  return s;
}

PhantomCase generate_phantom_case(const PhantomSpec& spec, int index) {
  spec.validate();
  Rng rng(derive_seed(spec.seed, static_cast<std::uint64_t>(index)));
  const std::int64_t S = spec.grid;
  const double ct = std::cos(spec.theta), st = std::sin(spec.theta);

  // Background: base level + oriented sinusoid + noise smoothed along the
  // stripe direction (perpendicular to the intensity gradient).
  const double base = 0.35;
  const double freq = rng.uniform(3.0, 6.0);
  const double phase = rng.uniform(0.0, 2.0 * M_PI);
  Tensor noise({S, S});
  for (std::int64_t i = 0; i < noise.size(); ++i) noise[i] = rng.normal(0.0, spec.noise_sigma);

  Tensor field({S, S});
  for (std::int64_t r = 0; r < S; ++r)
    for (std::int64_t c = 0; c < S; ++c) {
      const double u = (static_cast<double>(c) * ct + static_cast<double>(r) * st) / static_cast<double>(S);
      double sm = 0.0;
      for (int j = -2; j <= 2; ++j) {
        const std::int64_t rr = std::clamp<std::int64_t>(r + static_cast<std::int64_t>(std::llround(j * ct)), 0, S - 1);
        const std::int64_t cc = std::clamp<std::int64_t>(c - static_cast<std::int64_t>(std::llround(j * st)), 0, S - 1);
        sm += noise(rr, cc);
      }
      field(r, c) = base + spec.texture_strength * std::sin(2.0 * M_PI * freq * u + phase) + sm / 5.0;
    }

  // Lesions: ellipses with major axis along theta, eccentricity-derived minor
  // axis, additive bump with 10% headroom over the configured contrast.
  Tensor mask({S, S});
  const int n_lesions = static_cast<int>(rng.uniform_int(spec.min_lesions, spec.max_lesions));
  const double bump = 1.1 * spec.contrast;
  for (int les = 0; les < n_lesions; ++les) {
    const double a = rng.uniform(0.08, 0.16) * static_cast<double>(S);
    const double b = a * std::sqrt(1.0 - spec.eccentricity * spec.eccentricity);
    const std::int64_t margin = static_cast<std::int64_t>(std::ceil(a)) + 1;
    const std::int64_t cr = rng.uniform_int(margin, S - 1 - margin);
    const std::int64_t cc = rng.uniform_int(margin, S - 1 - margin);
    for (std::int64_t r = 0; r < S; ++r)
      for (std::int64_t c = 0; c < S; ++c) {
        const double dr = static_cast<double>(r - cr), dc = static_cast<double>(c - cc);
        const double major = dc * ct + dr * st;
        const double minor = -dc * st + dr * ct;
        if ((major * major) / (a * a) + (minor * minor) / (b * b) <= 1.0) mask(r, c) = 1.0;
      }
  }

  PhantomCase out;
  std::ostringstream id;
  id << "case_" << std::setfill('0') << std::setw(3) << index;
  out.case_id = id.str();
  out.mask = mask;
  out.image = Tensor({1, S, S});
  for (std::int64_t r = 0; r < S; ++r)
    for (std::int64_t c = 0; c < S; ++c) {
      // Texture suppressed inside lesions so the configured contrast is a
      // guaranteed lower bound on the mean intensity gap.
      const double v = mask(r, c) > 0.5 ? base + bump + noise(r, c) : field(r, c);
      out.image[r * S + c] = std::clamp(v, 0.0, 1.0);
    }
  return out;
}

std::vector<PhantomCase> generate_phantom(const PhantomSpec& spec) {
  spec.validate();
  std::vector<PhantomCase> cases;
  cases.reserve(static_cast<std::size_t>(spec.n_cases));
  for (int i = 0; i < spec.n_cases; ++i) cases.push_back(generate_phantom_case(spec, i));
  return cases;
}

// ---------------------------------------------------------------------------
// tensor file io
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'M', 'S', 'T', 'N'};
constexpr std::uint8_t kVersion = 1;
constexpr std::uint8_t kDtypeF32 = 1;

void put_u16(std::string& buf, std::uint16_t v) {
  buf.push_back(static_cast<char>(v & 0xff));
  buf.push_back(static_cast<char>((v >> 8) & 0xff));
}

void put_u32(std::string& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& buf, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(buf, bits);
}

class Reader {
 public:
  explicit Reader(std::string bytes) : bytes_(std::move(bytes)) {}

  std::uint8_t u8() { return static_cast<std::uint8_t>(take(1)[0]); }

  std::uint16_t u16() {
    const auto* p = take(2);
    return static_cast<std::uint16_t>(static_cast<unsigned char>(p[0]) |
                                      (static_cast<unsigned char>(p[1]) << 8));
  }

  std::uint32_t u32() {
    const auto* p = take(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[i])) << (8 * i);
    return v;
  }

  float f32() {
    const std::uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }

  std::string str(std::size_t n) { return std::string(take(n), n); }

  bool at_end() const { return pos_ == bytes_.size(); }

 private:
  const char* take(std::size_t n) {
    if (pos_ + n > bytes_.size()) throw TensorIoError(TensorIoErrorKind::Truncated, "tensor file truncated");
    const char* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }

  std::string bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

void write_tensors(const std::string& path, const std::vector<NamedTensor>& tensors) {
  if (tensors.size() > std::numeric_limits<std::uint32_t>::max()) {
    throw TensorIoError(TensorIoErrorKind::Overflow, "too many tensors");
  }
  std::string buf;
  buf.append(kMagic, 4);
  buf.push_back(static_cast<char>(kVersion));
  put_u32(buf, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    if (t.name.size() > std::numeric_limits<std::uint16_t>::max()) {
      throw TensorIoError(TensorIoErrorKind::Overflow, "tensor name too long: " + t.name);
    }
    if (t.value.rank() > 255) throw TensorIoError(TensorIoErrorKind::Overflow, "tensor rank too large");
    put_u16(buf, static_cast<std::uint16_t>(t.name.size()));
    buf.append(t.name);
    buf.push_back(static_cast<char>(t.value.rank()));
    for (int d = 0; d < t.value.rank(); ++d) {
      if (t.value.dim(d) > std::numeric_limits<std::uint32_t>::max()) {
        throw TensorIoError(TensorIoErrorKind::Overflow, "dimension overflow in " + t.name);
      }
      put_u32(buf, static_cast<std::uint32_t>(t.value.dim(d)));
    }
    buf.push_back(static_cast<char>(kDtypeF32));
    for (std::int64_t i = 0; i < t.value.size(); ++i) {
      const double v = t.value[i];
      if (!std::isfinite(v)) throw std::invalid_argument("write_tensors: non-finite value in " + t.name);
      put_f32(buf, static_cast<float>(v));
    }
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("write_tensors: cannot open " + path);
  f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!f) throw std::runtime_error("write_tensors: write failed for " + path);
}

std::vector<NamedTensor> read_tensors(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("read_tensors: cannot open " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  Reader r(ss.str());

  const std::string magic = r.str(4);
  if (std::memcmp(magic.data(), kMagic, 4) != 0) {
    throw TensorIoError(TensorIoErrorKind::BadMagic, "bad magic in " + path);
  }
  const std::uint8_t version = r.u8();
  if (version != kVersion) {
    throw TensorIoError(TensorIoErrorKind::BadVersion, "unsupported version " + std::to_string(version));
  }
  const std::uint32_t count = r.u32();
  std::vector<NamedTensor> out;
  out.reserve(count);
  for (std::uint32_t e = 0; e < count; ++e) {
    NamedTensor t;
    const std::uint16_t name_len = r.u16();
    t.name = r.str(name_len);
    const std::uint8_t rank = r.u8();
    std::vector<std::int64_t> dims(rank);
    for (int d = 0; d < rank; ++d) dims[static_cast<std::size_t>(d)] = static_cast<std::int64_t>(r.u32());
    const std::uint8_t dtype = r.u8();
    if (dtype != kDtypeF32) throw TensorIoError(TensorIoErrorKind::BadDtype, "unsupported dtype in " + t.name);
    Tensor v(dims);
    for (std::int64_t i = 0; i < v.size(); ++i) v[i] = static_cast<double>(r.f32());
    t.value = std::move(v);
    out.push_back(std::move(t));
  }
  if (!r.at_end()) throw TensorIoError(TensorIoErrorKind::Truncated, "trailing bytes in " + path);
  return out;
}

// ---------------------------------------------------------------------------
// dataset directory layout
// ---------------------------------------------------------------------------

void write_dataset(const std::string& dir, const std::vector<PhantomCase>& cases, const SplitAssignment& split) {
  fs::create_directories(fs::path(dir) / "cases");
  for (const auto& c : cases) {
    const fs::path cd = fs::path(dir) / "cases" / c.case_id;
    fs::create_directories(cd);
    write_tensors((cd / "image.mstn").string(), {{"image", c.image}});
    write_tensors((cd / "mask.mstn").string(), {{"mask", c.mask}});
  }
  std::ofstream f(fs::path(dir) / "split.csv");
  if (!f) throw std::runtime_error("write_dataset: cannot write split.csv");
  f << "case_id,split\n";
  for (const auto& id : split.train) f << id << ",train\n";
  for (const auto& id : split.val) f << id << ",val\n";
  for (const auto& id : split.test) f << id << ",test\n";
}

LoadedDataset load_dataset(const std::string& dir) {
  std::ifstream f(fs::path(dir) / "split.csv");
  if (!f) throw std::runtime_error("load_dataset: missing split.csv in " + dir);
  LoadedDataset ds;
  std::string line;
  std::getline(f, line);  // header
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw std::runtime_error("load_dataset: malformed split.csv line: " + line);
    const std::string id = line.substr(0, comma);
    const std::string split = line.substr(comma + 1);
    PhantomCase c;
    c.case_id = id;
    const fs::path cd = fs::path(dir) / "cases" / id;
    auto img = read_tensors((cd / "image.mstn").string());
    auto msk = read_tensors((cd / "mask.mstn").string());
    if (img.size() != 1 || msk.size() != 1) throw std::runtime_error("load_dataset: unexpected tensor count for " + id);
    c.image = std::move(img[0].value);
    c.mask = std::move(msk[0].value);
    ds.cases.push_back(std::move(c));
    if (split == "train")
      ds.split.train.push_back(id);
    else if (split == "val")
      ds.split.val.push_back(id);
    else if (split == "test")
      ds.split.test.push_back(id);
    else
      throw std::runtime_error("load_dataset: unknown split label: " + split);
  }
  return ds;
}

}  // namespace ms2d
