#include "ms2d/segnet.hpp"

#include <cmath>
#include <stdexcept>

#include "ms2d/data_pipeline.hpp"
#include "ms2d/rng.hpp"

namespace ms2d {

void ModelConfig::validate() const {
  const int n = num_stages();
  if (n < 1) throw std::invalid_argument("ModelConfig: need at least one stage");
  if (patch_size < 1 || img_size < 1 || in_channels < 1 || out_classes < 1 || state_dim < 1) {
    throw std::invalid_argument("ModelConfig: dimensions must be positive");
  }
  const std::int64_t unit = patch_size << (n - 1);
  if (img_size % unit != 0) {
    throw std::invalid_argument("ModelConfig: img_size must be divisible by patch_size*2^(stages-1) = " +
                                std::to_string(unit));
  }
  if (static_cast<int>(decoder_depths.size()) != n || static_cast<int>(stage_channels.size()) != n) {
    throw std::invalid_argument("ModelConfig: encoder/decoder/channel lists must have equal length");
  }
  for (int i = 0; i + 1 < n; ++i) {
    if (stage_channels[static_cast<std::size_t>(i + 1)] != 2 * stage_channels[static_cast<std::size_t>(i)]) {
      throw std::invalid_argument("ModelConfig: stage_channels must double per stage");
    }
  }
  for (int d : encoder_depths)
    if (d < 1) throw std::invalid_argument("ModelConfig: encoder depths must be >= 1");
  for (int d : decoder_depths)
    if (d < 1) throw std::invalid_argument("ModelConfig: decoder depths must be >= 1");
  if (bottleneck_depth < 1) throw std::invalid_argument("ModelConfig: bottleneck_depth must be >= 1");
  if (experiment_id < 1 || experiment_id > kNumExperiments) {
    throw std::invalid_argument("ModelConfig: experiment_id must be in 1..21");
  }
}

ModelConfig ModelConfig::desk(int experiment_id) {
  ModelConfig cfg;
  cfg.img_size = 32;
  cfg.in_channels = 1;
  cfg.stage_channels = {16, 32, 64, 128};
  cfg.state_dim = 8;
  cfg.out_classes = 1;
  cfg.experiment_id = experiment_id;
  return cfg;
}

namespace {

struct Registrar {
  ModelParams* m;

  ad::Var reg(const std::string& name, Tensor t) {
    ad::Var v = ad::leaf(std::move(t));
    m->param_names.push_back(name);
    m->params.push_back(v);
    return v;
  }

  Tensor trunc_normal(Rng& rng, std::vector<std::int64_t> shape) {
    Tensor t(std::move(shape));
    for (std::int64_t i = 0; i < t.size(); ++i) t[i] = rng.trunc_normal(0.02);
    return t;
  }

  StreamVars stream(Rng& rng, const std::string& prefix, std::int64_t C, std::int64_t N) {
    StreamVars s;
    s.state_dim = N;
    Tensor a_log({C, N});
    for (std::int64_t c = 0; c < C; ++c)
      for (std::int64_t n = 0; n < N; ++n) a_log(c, n) = std::log(static_cast<double>(n + 1));
    s.a_log = reg(prefix + ".a_log", std::move(a_log));
    s.d_skip = reg(prefix + ".d_skip", Tensor::full({C}, 1.0));
    s.w_delta = reg(prefix + ".w_delta", trunc_normal(rng, {C, C}));
    s.b_delta = reg(prefix + ".b_delta", Tensor({C}));
    s.w_b = reg(prefix + ".w_b", trunc_normal(rng, {N, C}));
    s.w_c = reg(prefix + ".w_c", trunc_normal(rng, {N, C}));
    return s;
  }

  VssBlockParams block(Rng& rng, const std::string& prefix, std::int64_t C, std::int64_t N,
                       const std::array<ScanId, 4>& scans) {
    VssBlockParams b;
    b.ln_gamma = reg(prefix + ".ln_gamma", Tensor::full({C}, 1.0));
    b.ln_beta = reg(prefix + ".ln_beta", Tensor({C}));
    b.dw_kernel = reg(prefix + ".dw_kernel", trunc_normal(rng, {C, 3, 3}));
    b.dw_bias = reg(prefix + ".dw_bias", Tensor({C}));
    b.ms2d.stream_scans = scans;
    for (int i = 0; i < kNumStreams; ++i) {
      b.ms2d.streams[static_cast<std::size_t>(i)] = stream(rng, prefix + ".ms2d.s" + std::to_string(i), C, N);
    }
    b.ms2d.mix_w = reg(prefix + ".ms2d.mix_w", trunc_normal(rng, {C, C}));
    b.ms2d.mix_b = reg(prefix + ".ms2d.mix_b", Tensor({C}));
    b.ms2d.norm_gamma = reg(prefix + ".ms2d.norm_gamma", Tensor::full({C}, 1.0));
    b.ms2d.norm_beta = reg(prefix + ".ms2d.norm_beta", Tensor({C}));
    b.pw_w = reg(prefix + ".pw_w", trunc_normal(rng, {C, C}));
    b.pw_b = reg(prefix + ".pw_b", Tensor({C}));
    return b;
  }
};

// Patch extraction index map: token (gr,gc), feature (dy,dx,ch) from a
// channels-last [S,S,Cin] image.
std::vector<std::int64_t> patch_gather_indices(std::int64_t S, std::int64_t Cin, std::int64_t p) {
  const std::int64_t g = S / p;
  std::vector<std::int64_t> idx;
  idx.reserve(static_cast<std::size_t>(g * g * p * p * Cin));
  for (std::int64_t gr = 0; gr < g; ++gr)
    for (std::int64_t gc = 0; gc < g; ++gc)
      for (std::int64_t dy = 0; dy < p; ++dy)
        for (std::int64_t dx = 0; dx < p; ++dx)
          for (std::int64_t ch = 0; ch < Cin; ++ch) idx.push_back(((gr * p + dy) * S + (gc * p + dx)) * Cin + ch);
  return idx;
}

}  // namespace

ModelParams build_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ModelParams m;
  m.cfg = cfg;
  Registrar R{&m};
  Rng rng(seed);
  const int n = cfg.num_stages();
  const std::int64_t C0 = cfg.stage_channels[0];
  const std::int64_t L1 = cfg.grid_at(0) * cfg.grid_at(0);
  const auto streams = experiment_streams(cfg.experiment_id).streams;

  m.patch_w = R.reg("patch.w", R.trunc_normal(rng, {C0, cfg.patch_size * cfg.patch_size * cfg.in_channels}));
  m.patch_b = R.reg("patch.b", Tensor({C0}));
  m.pos_bias = R.reg("patch.pos", Tensor({L1, C0}));

  m.encoder.resize(static_cast<std::size_t>(n));
  for (int s = 0; s < n; ++s) {
    const std::int64_t C = cfg.stage_channels[static_cast<std::size_t>(s)];
    for (int b = 0; b < cfg.encoder_depths[static_cast<std::size_t>(s)]; ++b) {
      m.encoder[static_cast<std::size_t>(s)].push_back(
          R.block(rng, "enc" + std::to_string(s) + ".b" + std::to_string(b), C, cfg.state_dim, streams));
    }
    if (s + 1 < n) {
      const std::int64_t Co = cfg.stage_channels[static_cast<std::size_t>(s + 1)];
      m.downs.emplace_back(R.reg("down" + std::to_string(s) + ".w", R.trunc_normal(rng, {Co, C, 2, 2})),
                           R.reg("down" + std::to_string(s) + ".b", Tensor({Co})));
    }
  }

  const std::int64_t Cdeep = cfg.stage_channels[static_cast<std::size_t>(n - 1)];
  for (int b = 0; b < cfg.bottleneck_depth; ++b) {
    m.bottleneck.push_back(R.block(rng, "mid.b" + std::to_string(b), Cdeep, cfg.state_dim, streams));
  }

  m.decoder.resize(static_cast<std::size_t>(n));
  for (int j = 0; j < n; ++j) {
    const std::int64_t C = cfg.stage_channels[static_cast<std::size_t>(n - 1 - j)];
    if (j > 0) {
      const std::int64_t Ci = cfg.stage_channels[static_cast<std::size_t>(n - j)];
      m.ups.emplace_back(R.reg("up" + std::to_string(j) + ".w", R.trunc_normal(rng, {C, Ci, 2, 2})),
                         R.reg("up" + std::to_string(j) + ".b", Tensor({C})));
    }
    for (int b = 0; b < cfg.decoder_depths[static_cast<std::size_t>(j)]; ++b) {
      m.decoder[static_cast<std::size_t>(j)].push_back(
          R.block(rng, "dec" + std::to_string(j) + ".b" + std::to_string(b), C, cfg.state_dim, streams));
    }
  }

  m.head_w = R.reg("head.w", R.trunc_normal(rng, {cfg.out_classes, C0}));
  m.head_b = R.reg("head.b", Tensor({cfg.out_classes}));

  // Walk the decoder's actual wiring and confirm each stage output matches the
  // shape of its encoder counterpart (stage n-1-j).
  {
    std::int64_t g = cfg.grid_at(n - 1);
    std::int64_t c = Cdeep;
    for (int j = 0; j < n; ++j) {
      if (j > 0) {
        g *= 2;
        const auto& w = m.ups[static_cast<std::size_t>(j - 1)].first.val();
        if (w.dim(1) != c) throw std::logic_error("build_model: decoder conv input width mismatch");
        c = w.dim(0);
      }
      if (g != cfg.grid_at(n - 1 - j) || c != cfg.stage_channels[static_cast<std::size_t>(n - 1 - j)]) {
        throw std::logic_error("build_model: decoder stage " + std::to_string(j) +
                               " output does not match its skip source shape");
      }
    }
  }
  return m;
}

ad::Var forward_graph(const ModelParams& m, const Tensor& image_chw) {
  const ModelConfig& cfg = m.cfg;
  if (image_chw.rank() != 3 || image_chw.dim(0) != cfg.in_channels || image_chw.dim(1) != cfg.img_size ||
      image_chw.dim(2) != cfg.img_size) {
    throw std::invalid_argument("forward: image shape " + image_chw.shape_str() + " does not match config");
  }
  const std::int64_t S = cfg.img_size, Cin = cfg.in_channels;
  // channels-last copy for spatial ops
  Tensor img({S, S, Cin});
  for (std::int64_t c = 0; c < Cin; ++c)
    for (std::int64_t r = 0; r < S; ++r)
      for (std::int64_t w = 0; w < S; ++w) img(r, w, c) = image_chw(c, r, w);

  const int n = cfg.num_stages();
  const std::int64_t g1 = cfg.grid_at(0);
  const std::int64_t L1 = g1 * g1;

  ad::Var x = ad::constant(std::move(img));
  ad::Var tok = ad::gather_flat(x, patch_gather_indices(S, Cin, cfg.patch_size),
                                {L1, cfg.patch_size * cfg.patch_size * Cin});
  ad::Var emb = ad::add(ad::linear(tok, m.patch_w, m.patch_b), m.pos_bias);
  ad::Var v = ad::reshape(emb, {g1, g1, cfg.stage_channels[0]});

  std::vector<ad::Var> skips;
  for (int s = 0; s < n; ++s) {
    for (const auto& blk : m.encoder[static_cast<std::size_t>(s)]) v = vss_block_forward(v, blk);
    skips.push_back(v);
    if (s + 1 < n) {
      v = ad::conv2d(v, m.downs[static_cast<std::size_t>(s)].first, m.downs[static_cast<std::size_t>(s)].second,
                     /*stride=*/2, 0, 0, 0, 0);
    }
  }
  for (const auto& blk : m.bottleneck) v = vss_block_forward(v, blk);

  for (int j = 0; j < n; ++j) {
    if (j > 0) {
      const std::int64_t g = cfg.grid_at(n - 1 - j);
      v = ad::bilinear_resize(v, g, g);
      v = ad::conv2d(v, m.ups[static_cast<std::size_t>(j - 1)].first, m.ups[static_cast<std::size_t>(j - 1)].second,
                     /*stride=*/1, 0, 0, 1, 1);
      v = ad::add(v, skips[static_cast<std::size_t>(n - 1 - j)]);
    }
    for (const auto& blk : m.decoder[static_cast<std::size_t>(j)]) v = vss_block_forward(v, blk);
  }

  ad::Var logits_grid = ad::linear(ad::reshape(v, {L1, cfg.stage_channels[0]}), m.head_w, m.head_b);
  ad::Var logits = ad::bilinear_resize(ad::reshape(logits_grid, {g1, g1, cfg.out_classes}), S, S);
  return logits;  // [S,S,K]
}

Tensor forward(const ModelParams& m, const Tensor& batch) {
  if (batch.rank() != 4) throw std::invalid_argument("forward: batch must be [B,Cin,S,S]");
  const std::int64_t B = batch.dim(0), Cin = batch.dim(1), S = batch.dim(2);
  const std::int64_t K = m.cfg.out_classes;
  Tensor out({B, K, S, S});
  ad::NoGradGuard ng;
  for (std::int64_t b = 0; b < B; ++b) {
    Tensor img({Cin, S, S});
    for (std::int64_t i = 0; i < img.size(); ++i) img[i] = batch[b * img.size() + i];
    const Tensor logits = forward_graph(m, img).val();  // [S,S,K]
    for (std::int64_t r = 0; r < S; ++r)
      for (std::int64_t w = 0; w < S; ++w)
        for (std::int64_t k = 0; k < K; ++k) out[((b * K + k) * S + r) * S + w] = logits(r, w, k);
  }
  return out;
}

std::int64_t count_params(const ModelParams& m) {
  std::int64_t total = 0;
  for (const auto& p : m.params) total += p.val().size();
  return total;
}

std::int64_t count_flops(const ModelConfig& cfg) {
  cfg.validate();
  const int n = cfg.num_stages();

  auto layernorm_flops = [](std::int64_t L, std::int64_t C) { return L * (8 * C + 5); };
  auto linear_flops = [](std::int64_t L, std::int64_t Ci, std::int64_t Co) { return 2 * L * Co * Ci; };
  auto vss_flops = [&](std::int64_t g, std::int64_t C) {
    const std::int64_t L = g * g;
    std::int64_t f = 0;
    f += layernorm_flops(L, C);
    f += L * C * 18;  // depthwise 3x3 + bias, padded taps counted
    f += 4 * L * C;   // silu
    f += ms2d_flops({g, g}, C, cfg.state_dim);
    f += linear_flops(L, C, C, true);  // pointwise
    f += L * C;                        // residual add
    return f;
  };

  const std::int64_t g1 = cfg.grid_at(0), L1 = g1 * g1, C0 = cfg.stage_channels[0];
  std::int64_t total = 0;
  total += linear_flops(L1, cfg.patch_size * cfg.patch_size * cfg.in_channels, C0, true);  // patch embed
  total += L1 * C0;                                                                        // positional bias

  for (int s = 0; s < n; ++s) {
    const std::int64_t g = cfg.grid_at(s), C = cfg.stage_channels[static_cast<std::size_t>(s)];
    total += cfg.encoder_depths[static_cast<std::size_t>(s)] * vss_flops(g, C);
    if (s + 1 < n) {
      const std::int64_t go = cfg.grid_at(s + 1), Co = cfg.stage_channels[static_cast<std::size_t>(s + 1)];
      total += go * go * Co * (2 * 4 * C);  // 2x2 stride-2 conv + bias
    }
  }
  total += cfg.bottleneck_depth * vss_flops(cfg.grid_at(n - 1), cfg.stage_channels[static_cast<std::size_t>(n - 1)]);

  for (int j = 0; j < n; ++j) {
    const std::int64_t g = cfg.grid_at(n - 1 - j), C = cfg.stage_channels[static_cast<std::size_t>(n - 1 - j)];
    if (j > 0) {
      const std::int64_t Ci = cfg.stage_channels[static_cast<std::size_t>(n - j)];
      total += g * g * Ci * 9;              // bilinear x2 (3 lerps per output)
      total += g * g * C * (2 * 4 * Ci);    // 2x2 same-pad conv + bias
      total += g * g * C;                   // skip add
    }
    total += cfg.decoder_depths[static_cast<std::size_t>(j)] * vss_flops(g, C);
  }

  total += linear_flops(L1, C0, cfg.out_classes, true);        // head
  total += cfg.img_size * cfg.img_size * cfg.out_classes * 9;  // logit upsample
  return total;
}

void save_checkpoint(const ModelParams& m, const std::string& path) {
  std::vector<NamedTensor> ts;
  const ModelConfig& c = m.cfg;
  auto scalar = [&](const std::string& name, double v) { ts.push_back({name, Tensor::scalar(v)}); };
  scalar("cfg.img_size", static_cast<double>(c.img_size));
  scalar("cfg.in_channels", static_cast<double>(c.in_channels));
  scalar("cfg.patch_size", static_cast<double>(c.patch_size));
  scalar("cfg.bottleneck_depth", c.bottleneck_depth);
  scalar("cfg.state_dim", static_cast<double>(c.state_dim));
  scalar("cfg.out_classes", static_cast<double>(c.out_classes));
  scalar("cfg.experiment_id", c.experiment_id);
  auto vec = [&](const std::string& name, const std::vector<double>& v) {
    ts.push_back({name, Tensor({static_cast<std::int64_t>(v.size())}, v)});
  };
  vec("cfg.encoder_depths", std::vector<double>(c.encoder_depths.begin(), c.encoder_depths.end()));
  vec("cfg.decoder_depths", std::vector<double>(c.decoder_depths.begin(), c.decoder_depths.end()));
  vec("cfg.stage_channels", std::vector<double>(c.stage_channels.begin(), c.stage_channels.end()));
  for (std::size_t i = 0; i < m.params.size(); ++i) ts.push_back({m.param_names[i], m.params[i].val()});
  write_tensors(path, ts);
}

ModelParams load_checkpoint(const std::string& path) {
  auto ts = read_tensors(path);
  auto find = [&](const std::string& name) -> const Tensor& {
    for (const auto& t : ts)
      if (t.name == name) return t.value;
    throw std::runtime_error("load_checkpoint: missing entry " + name);
  };
  ModelConfig cfg;
  cfg.img_size = static_cast<std::int64_t>(find("cfg.img_size")[0]);
  cfg.in_channels = static_cast<std::int64_t>(find("cfg.in_channels")[0]);
  cfg.patch_size = static_cast<std::int64_t>(find("cfg.patch_size")[0]);
  cfg.bottleneck_depth = static_cast<int>(find("cfg.bottleneck_depth")[0]);
  cfg.state_dim = static_cast<std::int64_t>(find("cfg.state_dim")[0]);
  cfg.out_classes = static_cast<std::int64_t>(find("cfg.out_classes")[0]);
  cfg.experiment_id = static_cast<int>(find("cfg.experiment_id")[0]);
  auto to_int_vec = [&](const std::string& name) {
    const Tensor& t = find(name);
    std::vector<int> v;
    for (std::int64_t i = 0; i < t.size(); ++i) v.push_back(static_cast<int>(t[i]));
    return v;
  };
  cfg.encoder_depths = to_int_vec("cfg.encoder_depths");
  cfg.decoder_depths = to_int_vec("cfg.decoder_depths");
  cfg.stage_channels.clear();
  for (int v : to_int_vec("cfg.stage_channels")) cfg.stage_channels.push_back(v);

  ModelParams m = build_model(cfg, 0);
  for (std::size_t i = 0; i < m.params.size(); ++i) {
    m.params[i].set_value(find(m.param_names[i]));
  }
  return m;
}

}  // namespace ms2d
