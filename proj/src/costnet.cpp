#include "zipmpc/costnet.hpp"

#include <zlib.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <json.hpp>

namespace zipmpc {

namespace {

constexpr char kMagic[8] = {'Z', 'M', 'P', 'C', 'N', 'E', 'T', '1'};
constexpr std::uint32_t kFormatVersion = 1;
constexpr double kLnEps = 1e-5;

using MatMap = Eigen::Map<Eigen::MatrixXd>;
using CMatMap = Eigen::Map<const Eigen::MatrixXd>;

double leaky(double x, double a) { return x > 0.0 ? x : a * x; }
double leaky_grad(double x, double a) { return x > 0.0 ? 1.0 : a; }

}  // namespace

int NetConfig::conv_out_len() const {
  if (!use_context || context_len == 0 || !use_conv) return 0;
  return (context_len - conv_kernel) / conv_stride + 1;
}

int NetConfig::feature_dim() const {
  if (!use_context || context_len == 0) return 3;
  return 3 + (use_conv ? conv_channels * conv_out_len() : context_len);
}

int NetConfig::raw_output_dim() const {
  return head == Head::cost_schedule ? 2 * cost_dim * (horizon + 1) : output_dim;
}

int NetConfig::output_size() const {
  return head == Head::cost_schedule ? 2 * cost_dim * (horizon + 1) : output_dim;
}

void NetConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("net config: " + m); };
  if (head == Head::cost_schedule && (horizon < 1 || cost_dim < 1)) fail("bad schedule shape");
  if (head == Head::direct && output_dim < 1) fail("output_dim must be >= 1");
  if (context_len < 0) fail("negative context length");
  if (use_context && use_conv && context_len > 0) {
    if (conv_channels < 1 || conv_kernel < 1 || conv_stride < 1) fail("bad conv spec");
    if (context_len < conv_kernel) fail("context shorter than the conv kernel");
  }
  for (int w : fc_widths)
    if (w < 1) fail("fc width must be >= 1");
  if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must lie in [0, 1)");
  if (input_scale.size() != 4) fail("input_scale needs 4 entries");
  const std::size_t want = head == Head::cost_schedule ? static_cast<std::size_t>(2 * cost_dim)
                                                       : static_cast<std::size_t>(output_dim);
  if (output_scale.size() != want) fail("output_scale has the wrong length");
  for (double s : output_scale)
    if (!(s > 0.0)) fail("output_scale entries must be positive");
}

std::string NetConfig::to_json() const {
  nlohmann::json j;
  j["head"] = head == Head::cost_schedule ? "cost_schedule" : "direct";
  j["horizon"] = horizon;
  j["cost_dim"] = cost_dim;
  j["output_dim"] = output_dim;
  j["context_len"] = context_len;
  j["use_context"] = use_context;
  j["use_conv"] = use_conv;
  j["conv_channels"] = conv_channels;
  j["conv_kernel"] = conv_kernel;
  j["conv_stride"] = conv_stride;
  j["fc_widths"] = fc_widths;
  j["leaky_slope"] = leaky_slope;
  j["dropout"] = dropout;
  j["layer_norm"] = layer_norm;
  j["input_scale"] = input_scale;
  j["output_scale"] = output_scale;
  return j.dump();
}

NetConfig NetConfig::from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  NetConfig c;
  c.head = j.at("head").get<std::string>() == "direct" ? Head::direct : Head::cost_schedule;
  c.horizon = j.at("horizon").get<int>();
  c.cost_dim = j.at("cost_dim").get<int>();
  c.output_dim = j.at("output_dim").get<int>();
  c.context_len = j.at("context_len").get<int>();
  c.use_context = j.at("use_context").get<bool>();
  c.use_conv = j.at("use_conv").get<bool>();
  c.conv_channels = j.at("conv_channels").get<int>();
  c.conv_kernel = j.at("conv_kernel").get<int>();
  c.conv_stride = j.at("conv_stride").get<int>();
  c.fc_widths = j.at("fc_widths").get<std::vector<int>>();
  c.leaky_slope = j.at("leaky_slope").get<double>();
  c.dropout = j.at("dropout").get<double>();
  c.layer_norm = j.at("layer_norm").get<bool>();
  c.input_scale = j.at("input_scale").get<std::vector<double>>();
  c.output_scale = j.at("output_scale").get<std::vector<double>>();
  return c;
}

CostNet::Layout CostNet::make_layout(const NetConfig& cfg) {
  Layout L;
  Eigen::Index at = 0;
  if (cfg.conv_out_len() > 0) {
    L.conv_w = at;
    at += cfg.conv_channels * cfg.conv_kernel;
    L.conv_b = at;
    at += cfg.conv_channels;
  }
  int in = cfg.feature_dim();
  for (int w : cfg.fc_widths) {
    L.in.push_back(in);
    L.out.push_back(w);
    L.w.push_back(at);
    at += static_cast<Eigen::Index>(w) * in;
    L.b.push_back(at);
    at += w;
    if (cfg.layer_norm) {
      L.ln_g.push_back(at);
      at += w;
      L.ln_b.push_back(at);
      at += w;
    }
    in = w;
  }
  L.head_in = in;
  L.head_out = cfg.head == NetConfig::Head::cost_schedule ? 2 * cfg.cost_dim * (cfg.horizon + 1)
                                                          : cfg.output_dim;
  L.head_w = at;
  at += static_cast<Eigen::Index>(L.head_out) * in;
  L.head_b = at;
  at += L.head_out;
  L.total = at;
  return L;
}

CostNet::CostNet(NetConfig config, std::uint64_t seed) : cfg_(std::move(config)) {
  cfg_.validate();
  layout_ = make_layout(cfg_);
  theta_ = Eigen::VectorXd::Zero(layout_.total);
  std::mt19937_64 rng(seed);
  const double gain = std::sqrt(2.0 / (1.0 + cfg_.leaky_slope * cfg_.leaky_slope));
  auto kaiming = [&](Eigen::Index offset, Eigen::Index count, int fan_in) {
    std::uniform_real_distribution<double> U(-1.0, 1.0);
    const double bound = gain * std::sqrt(3.0 / fan_in);
    for (Eigen::Index i = 0; i < count; ++i) theta_[offset + i] = bound * U(rng);
  };
  if (cfg_.conv_out_len() > 0)
    kaiming(layout_.conv_w, cfg_.conv_channels * cfg_.conv_kernel, cfg_.conv_kernel);
  for (std::size_t l = 0; l < layout_.w.size(); ++l) {
    kaiming(layout_.w[l], static_cast<Eigen::Index>(layout_.out[l]) * layout_.in[l], layout_.in[l]);
    if (cfg_.layer_norm) theta_.segment(layout_.ln_g[l], layout_.out[l]).setOnes();
  }
  adam_m_ = Eigen::VectorXd::Zero(layout_.total);
  adam_v_ = Eigen::VectorXd::Zero(layout_.total);
}

void CostNet::set_params(const Eigen::VectorXd& theta) {
  if (theta.size() != theta_.size()) throw std::invalid_argument("parameter vector size mismatch");
  theta_ = theta;
  ++version_;
}

Eigen::VectorXd CostNet::forward(const Eigen::Vector3d& state, const std::vector<double>& context,
                                 NetMode mode, NetTape* tape, std::mt19937_64* rng) const {
  const bool ctx = cfg_.use_context && cfg_.context_len > 0;
  if (ctx && static_cast<int>(context.size()) != cfg_.context_len)
    throw std::invalid_argument("context length " + std::to_string(context.size()) +
                                " does not match the network (" +
                                std::to_string(cfg_.context_len) + ")");
  const bool drop = mode == NetMode::train && cfg_.dropout > 0.0;
  if (drop && !rng) throw std::invalid_argument("train-mode forward needs an rng");
  const double slope = cfg_.leaky_slope;

  NetTape local;
  NetTape& t = tape ? *tape : local;
  t = NetTape{};
  t.version = version_;

  Eigen::VectorXd a(cfg_.feature_dim());
  a[0] = state[0] * cfg_.input_scale[0];
  a[1] = state[1] * cfg_.input_scale[1];
  a[2] = state[2] * cfg_.input_scale[2];
  if (ctx) {
    t.context_in.resize(cfg_.context_len);
    for (int j = 0; j < cfg_.context_len; ++j)
      t.context_in[j] = context[static_cast<std::size_t>(j)] * cfg_.input_scale[3];
    if (cfg_.use_conv) {
      const int C = cfg_.conv_channels, K = cfg_.conv_kernel, S = cfg_.conv_stride;
      const int Lc = cfg_.conv_out_len();
      CMatMap W(theta_.data() + layout_.conv_w, C, K);
      const auto b = theta_.segment(layout_.conv_b, C);
      t.conv_pre.resize(C, Lc);
      for (int c = 0; c < C; ++c)
        for (int p = 0; p < Lc; ++p) {
          double s = b[c];
          for (int k = 0; k < K; ++k) s += W(c, k) * t.context_in[p * S + k];
          t.conv_pre(c, p) = s;
          a[3 + c * Lc + p] = leaky(s, slope);
        }
    } else {
      a.tail(cfg_.context_len) = t.context_in;
    }
  }
  t.first_in = a;

  const std::size_t nl = layout_.w.size();
  t.fc_in.resize(nl);
  t.fc_pre.resize(nl);
  t.ln_hat.resize(nl);
  t.ln_inv_std.assign(nl, 1.0);
  t.act_in.resize(nl);
  t.drop_mask.resize(nl);
  std::bernoulli_distribution keep(1.0 - cfg_.dropout);
  for (std::size_t l = 0; l < nl; ++l) {
    const int in = layout_.in[l], out = layout_.out[l];
    CMatMap W(theta_.data() + layout_.w[l], out, in);
    t.fc_in[l] = a;
    Eigen::VectorXd z = W * a + theta_.segment(layout_.b[l], out);
    t.fc_pre[l] = z;
    Eigen::VectorXd y = z;
    if (cfg_.layer_norm) {
      const double mu = z.mean();
      const double var = (z.array() - mu).square().mean();
      const double inv = 1.0 / std::sqrt(var + kLnEps);
      t.ln_hat[l] = (z.array() - mu) * inv;
      t.ln_inv_std[l] = inv;
      y = t.ln_hat[l].cwiseProduct(theta_.segment(layout_.ln_g[l], out)) +
          theta_.segment(layout_.ln_b[l], out);
    }
    t.act_in[l] = y;
    Eigen::VectorXd h = y.unaryExpr([slope](double v) { return leaky(v, slope); });
    t.drop_mask[l] = Eigen::VectorXd::Ones(out);
    if (drop) {
      const double scale = 1.0 / (1.0 - cfg_.dropout);
      for (int j = 0; j < out; ++j) t.drop_mask[l][j] = keep(*rng) ? scale : 0.0;
      h = h.cwiseProduct(t.drop_mask[l]);
    }
    a = std::move(h);
  }
  t.head_in = a;
  CMatMap Wh(theta_.data() + layout_.head_w, layout_.head_out, layout_.head_in);
  const Eigen::VectorXd raw = Wh * a + theta_.segment(layout_.head_b, layout_.head_out);

  Eigen::VectorXd e;
  if (cfg_.head == NetConfig::Head::cost_schedule) {
    // raw = [global | modulation stage 0 | ... | modulation stage N_S-1]
    const int D2 = 2 * cfg_.cost_dim;
    e.resize(cfg_.output_size());
    for (int i = 0; i <= cfg_.horizon; ++i) {
      e.segment(i * D2, D2) = raw.head(D2);
      if (i < cfg_.horizon) e.segment(i * D2, D2) += raw.segment((i + 1) * D2, D2);
    }
  } else {
    e = raw;
  }
  t.expanded = e;
  t.valid = true;

  Eigen::VectorXd outv(e.size());
  const auto ns = static_cast<Eigen::Index>(cfg_.output_scale.size());
  for (Eigen::Index j = 0; j < e.size(); ++j)
    outv[j] = cfg_.output_scale[static_cast<std::size_t>(j % ns)] * std::tanh(e[j]);
  return outv;
}

Eigen::VectorXd CostNet::backward(const NetTape& t, const Eigen::VectorXd& up) const {
  if (!t.valid || t.version != version_)
    throw std::logic_error("stale tape: parameters changed since the forward pass");
  if (up.size() != cfg_.output_size()) throw std::invalid_argument("upstream size mismatch");
  const double slope = cfg_.leaky_slope;
  Eigen::VectorXd g = Eigen::VectorXd::Zero(theta_.size());

  const auto ns = static_cast<Eigen::Index>(cfg_.output_scale.size());
  Eigen::VectorXd ge(up.size());
  for (Eigen::Index j = 0; j < up.size(); ++j) {
    const double th = std::tanh(t.expanded[j]);
    ge[j] = up[j] * cfg_.output_scale[static_cast<std::size_t>(j % ns)] * (1.0 - th * th);
  }
  Eigen::VectorXd graw = Eigen::VectorXd::Zero(layout_.head_out);
  if (cfg_.head == NetConfig::Head::cost_schedule) {
    const int D2 = 2 * cfg_.cost_dim;
    for (int i = 0; i <= cfg_.horizon; ++i) {
      graw.head(D2) += ge.segment(i * D2, D2);
      if (i < cfg_.horizon) graw.segment((i + 1) * D2, D2) = ge.segment(i * D2, D2);
    }
  } else {
    graw = ge;
  }

  MatMap(g.data() + layout_.head_w, layout_.head_out, layout_.head_in) =
      graw * t.head_in.transpose();
  g.segment(layout_.head_b, layout_.head_out) = graw;
  Eigen::VectorXd ga =
      CMatMap(theta_.data() + layout_.head_w, layout_.head_out, layout_.head_in).transpose() *
      graw;

  for (std::size_t li = layout_.w.size(); li-- > 0;) {
    const int in = layout_.in[li], out = layout_.out[li];
    Eigen::VectorXd gy = ga.cwiseProduct(t.drop_mask[li]);
    for (int j = 0; j < out; ++j) gy[j] *= leaky_grad(t.act_in[li][j], slope);
    Eigen::VectorXd gz = gy;
    if (cfg_.layer_norm) {
      const auto gamma = theta_.segment(layout_.ln_g[li], out);
      g.segment(layout_.ln_g[li], out) = gy.cwiseProduct(t.ln_hat[li]);
      g.segment(layout_.ln_b[li], out) = gy;
      const Eigen::VectorXd gh = gy.cwiseProduct(gamma);
      const double D = out;
      const double s1 = gh.sum();
      const double s2 = gh.dot(t.ln_hat[li]);
      gz = (t.ln_inv_std[li] / D) * (D * gh.array() - s1 - t.ln_hat[li].array() * s2).matrix();
    }
    MatMap(g.data() + layout_.w[li], out, in) = gz * t.fc_in[li].transpose();
    g.segment(layout_.b[li], out) = gz;
    ga = CMatMap(theta_.data() + layout_.w[li], out, in).transpose() * gz;
  }

  if (cfg_.conv_out_len() > 0) {
    const int C = cfg_.conv_channels, K = cfg_.conv_kernel, S = cfg_.conv_stride;
    const int Lc = cfg_.conv_out_len();
    MatMap gW(g.data() + layout_.conv_w, C, K);
    for (int c = 0; c < C; ++c)
      for (int p = 0; p < Lc; ++p) {
        const double gc = ga[3 + c * Lc + p] * leaky_grad(t.conv_pre(c, p), slope);
        g[layout_.conv_b + c] += gc;
        for (int k = 0; k < K; ++k) gW(c, k) += gc * t.context_in[p * S + k];
      }
  }
  return g;
}

bool CostNet::adam_step(const Eigen::VectorXd& grad, double lr, double beta1, double beta2,
                        double eps) {
  if (grad.size() != theta_.size()) throw std::invalid_argument("gradient size mismatch");
  if (!grad.allFinite()) return false;
  ++adam_t_;
  adam_m_ = beta1 * adam_m_ + (1.0 - beta1) * grad;
  adam_v_ = beta2 * adam_v_ + (1.0 - beta2) * grad.cwiseAbs2();
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(adam_t_));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(adam_t_));
  theta_.array() -= lr * (adam_m_.array() / c1) / ((adam_v_.array() / c2).sqrt() + eps);
  ++version_;
  return true;
}

CostSchedule CostNet::to_schedule(const Eigen::VectorXd& out) const {
  if (cfg_.head != NetConfig::Head::cost_schedule)
    throw std::logic_error("to_schedule needs a schedule head");
  if (out.size() != cfg_.output_size()) throw std::invalid_argument("output size mismatch");
  const int D = cfg_.cost_dim;
  CostSchedule s;
  for (int i = 0; i <= cfg_.horizon; ++i) {
    s.q.push_back(out.segment(2 * D * i, D));
    s.p.push_back(out.segment(2 * D * i + D, D));
  }
  return s;
}

Eigen::VectorXd CostNet::from_schedule(const CostSchedule& grad) const {
  const int D = cfg_.cost_dim;
  if (grad.stages() != cfg_.horizon + 1 || grad.dim() != D)
    throw std::invalid_argument("schedule shape mismatch");
  Eigen::VectorXd v(cfg_.output_size());
  for (int i = 0; i <= cfg_.horizon; ++i) {
    v.segment(2 * D * i, D) = grad.q[static_cast<std::size_t>(i)];
    v.segment(2 * D * i + D, D) = grad.p[static_cast<std::size_t>(i)];
  }
  return v;
}

void CostNet::save(const std::filesystem::path& path) const {
  const std::string header = cfg_.to_json();
  std::string buf;
  auto put = [&buf](const void* p, std::size_t n) {
    buf.append(static_cast<const char*>(p), n);
  };
  put(kMagic, sizeof kMagic);
  put(&kFormatVersion, sizeof kFormatVersion);
  const auto hlen = static_cast<std::uint32_t>(header.size());
  put(&hlen, sizeof hlen);
  put(header.data(), header.size());
  const auto count = static_cast<std::uint64_t>(theta_.size());
  put(&count, sizeof count);
  put(theta_.data(), sizeof(double) * theta_.size());
  const auto crc = static_cast<std::uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(buf.data()), static_cast<uInt>(buf.size())));
  put(&crc, sizeof crc);

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write " + tmp);
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw CheckpointError("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

CostNet CostNet::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  const std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::size_t at = 0;
  auto take = [&](void* p, std::size_t n) {
    if (at + n > buf.size()) throw CheckpointError("truncated checkpoint " + path.string());
    std::memcpy(p, buf.data() + at, n);
    at += n;
  };
  char magic[8];
  take(magic, sizeof magic);
  if (std::memcmp(magic, kMagic, sizeof kMagic) != 0)
    throw CheckpointError("not a cost-network checkpoint: " + path.string());
  std::uint32_t version = 0;
  take(&version, sizeof version);
  if (version != kFormatVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  std::uint32_t hlen = 0;
  take(&hlen, sizeof hlen);
  std::string header(hlen, '\0');
  take(header.data(), hlen);
  std::uint64_t count = 0;
  take(&count, sizeof count);
  if (count > (buf.size() - at) / sizeof(double)) throw CheckpointError("truncated parameters");
  Eigen::VectorXd theta(static_cast<Eigen::Index>(count));
  take(theta.data(), sizeof(double) * count);
  const std::size_t body = at;
  std::uint32_t crc = 0;
  take(&crc, sizeof crc);
  const auto actual = static_cast<std::uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(buf.data()), static_cast<uInt>(body)));
  if (crc != actual) throw CheckpointError("checksum mismatch in " + path.string());

  NetConfig cfg;
  try {
    cfg = NetConfig::from_json(header);
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("bad checkpoint header: ") + e.what());
  }
  CostNet net(cfg, 0);
  if (net.num_params() != static_cast<int>(count))
    throw CheckpointError("parameter count does not match the embedded config");
  net.theta_ = theta;
  return net;
}

}  // namespace zipmpc
