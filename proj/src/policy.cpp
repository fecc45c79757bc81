#include "trgrpo/policy.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace trgrpo {

Vocabulary::Vocabulary(std::vector<std::string> tokens, const std::string& eos) : tokens_(std::move(tokens)) {
  if (tokens_.empty() || size() > kMaxSize) throw std::invalid_argument("vocabulary size must be in [1, 64]");
  for (std::size_t i = 0; i < tokens_.size(); ++i)
    for (std::size_t j = i + 1; j < tokens_.size(); ++j)
      if (tokens_[i] == tokens_[j]) throw std::invalid_argument("vocabulary: duplicate token '" + tokens_[i] + "'");
  eos_ = index_of(eos);
}

int Vocabulary::index_of(const std::string& symbol) const {
  auto it = std::find(tokens_.begin(), tokens_.end(), symbol);
  if (it == tokens_.end()) throw std::out_of_range("vocabulary: unknown token '" + symbol + "'");
  return static_cast<int>(it - tokens_.begin());
}

void PolicyShape::validate() const {
  if (vocab_size < 2 || vocab_size > Vocabulary::kMaxSize) throw std::invalid_argument("vocab_size must be in [2, 64]");
  if (embedding_dim < 1 || context_window < 1 || hidden_width < 1)
    throw std::invalid_argument("embedding_dim, context_window and hidden_width must be positive");
  if (hidden_layers < 1) throw std::invalid_argument("hidden_layers must be at least 1");
}

std::string hidden_weight_name(int layer) { return "hidden." + std::to_string(layer) + ".weight"; }
std::string hidden_bias_name(int layer) { return "hidden." + std::to_string(layer) + ".bias"; }

PolicyParams PolicyParams::zeros(const PolicyShape& shape) {
  shape.validate();
  PolicyParams p;
  p.shape = shape;
  p.embedding = Matrix::Zero(shape.vocab_size, shape.embedding_dim);
  for (int l = 0; l < shape.hidden_layers; ++l) {
    p.weights.push_back(Matrix::Zero(shape.hidden_width, shape.layer_input_width(l)));
    p.biases.push_back(Matrix::Zero(1, shape.hidden_width));
  }
  p.unembedding = Matrix::Zero(shape.vocab_size, shape.hidden_width);
  return p;
}

PolicyParams PolicyParams::initialize(const PolicyShape& shape, std::uint64_t seed, double scale) {
  PolicyParams p = zeros(shape);
  Rng rng = Rng::stream(seed, {0x1417});
  auto fill = [&](Matrix& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-scale, scale);
  };
  fill(p.embedding);
  for (auto& w : p.weights) fill(w);
  fill(p.unembedding);
  return p;
}

std::vector<std::string> PolicyParams::names() const {
  std::vector<std::string> out{"embedding"};
  for (int l = 0; l < shape.hidden_layers; ++l) {
    out.push_back(hidden_weight_name(l));
    out.push_back(hidden_bias_name(l));
  }
  out.push_back("unembedding");
  return out;
}

const Matrix& PolicyParams::array(const std::string& name) const {
  return const_cast<PolicyParams*>(this)->array(name);
}

Matrix& PolicyParams::array(const std::string& name) {
  if (name == "embedding") return embedding;
  if (name == "unembedding") return unembedding;
  for (int l = 0; l < shape.hidden_layers; ++l) {
    if (name == hidden_weight_name(l)) return weights[static_cast<std::size_t>(l)];
    if (name == hidden_bias_name(l)) return biases[static_cast<std::size_t>(l)];
  }
  throw std::out_of_range("policy: no parameter named '" + name + "'");
}

std::size_t PolicyParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& name : names()) n += static_cast<std::size_t>(array(name).size());
  return n;
}

Bindings PolicyParams::bindings() const {
  Bindings b;
  for (const auto& name : names()) b[name] = array(name);
  return b;
}

Vector PolicyParams::flatten() const {
  Vector out(static_cast<Eigen::Index>(parameter_count()));
  Eigen::Index k = 0;
  for (const auto& name : names()) {
    const Matrix& m = array(name);
    out.segment(k, m.size()) = Eigen::Map<const Vector>(m.data(), m.size());
    k += m.size();
  }
  return out;
}

void PolicyParams::assign(const Vector& flat) {
  if (flat.size() != static_cast<Eigen::Index>(parameter_count())) throw std::invalid_argument("assign: size mismatch");
  Eigen::Index k = 0;
  for (const auto& name : names()) {
    Matrix& m = array(name);
    Eigen::Map<Vector>(m.data(), m.size()) = flat.segment(k, m.size());
    k += m.size();
  }
}

Vector PolicyParams::flatten(const Gradients& grads) const {
  Vector out(static_cast<Eigen::Index>(parameter_count()));
  Eigen::Index k = 0;
  for (const auto& name : names()) {
    const Matrix& m = array(name);
    auto it = grads.find(name);
    if (it == grads.end()) {
      out.segment(k, m.size()).setZero();
    } else {
      if (it->second.rows() != m.rows() || it->second.cols() != m.cols())
        throw std::invalid_argument("flatten: gradient shape mismatch for '" + name + "'");
      out.segment(k, m.size()) = Eigen::Map<const Vector>(it->second.data(), m.size());
    }
    k += m.size();
  }
  return out;
}

std::vector<int> context_window(std::span<const int> history, int window) {
  std::vector<int> ctx(static_cast<std::size_t>(window), kPadIndex);
  const int n = static_cast<int>(history.size());
  for (int i = 0; i < window && i < n; ++i)
    ctx[static_cast<std::size_t>(window - 1 - i)] = history[static_cast<std::size_t>(n - 1 - i)];
  return ctx;
}

namespace {

void check_tokens(const PolicyParams& params, std::span<const int> tokens) {
  for (int t : tokens)
    if (t < 0 || t >= params.shape.vocab_size)
      throw std::out_of_range("token index " + std::to_string(t) + " outside vocabulary of size " +
                              std::to_string(params.shape.vocab_size));
}

RowVector window_input(const PolicyParams& params, std::span<const int> window) {
  const int e = params.shape.embedding_dim;
  RowVector x = RowVector::Zero(static_cast<Eigen::Index>(window.size()) * e);
  for (std::size_t c = 0; c < window.size(); ++c)
    if (window[c] != kPadIndex) x.segment(static_cast<Eigen::Index>(c) * e, e) = params.embedding.row(window[c]);
  return x;
}

RowVector layer_forward(const Matrix& weight, const Matrix& bias, const RowVector& x) {
  RowVector pre = x * weight.transpose();
  pre += bias.row(0);
  return pre.array().tanh().matrix();
}

void finish_distribution(const PolicyParams& params, ForwardTrace& trace) {
  trace.logits = trace.activations.back() * params.unembedding.transpose();
  const double m = trace.logits.maxCoeff();
  const auto shifted = (trace.logits.array() - m).eval();
  const double z = shifted.exp().sum();
  trace.probs = (shifted.exp() / z).matrix();
  trace.log_probs = (shifted - std::log(z)).matrix();
}

}  // namespace

ForwardTrace token_distribution(const PolicyParams& params, std::span<const int> context) {
  check_tokens(params, context);
  const auto window = context_window(context, params.shape.context_window);
  ForwardTrace trace;
  trace.input = window_input(params, window);
  const RowVector* x = &trace.input;
  for (int l = 0; l < params.shape.hidden_layers; ++l) {
    trace.activations.push_back(
        layer_forward(params.weights[static_cast<std::size_t>(l)], params.biases[static_cast<std::size_t>(l)], *x));
    x = &trace.activations.back();
  }
  finish_distribution(params, trace);
  return trace;
}

std::vector<double> sequence_log_probs(const PolicyParams& params, std::span<const int> prompt,
                                       std::span<const int> output) {
  if (output.empty()) throw std::invalid_argument("sequence_log_probs: empty output");
  check_tokens(params, output);
  std::vector<int> history(prompt.begin(), prompt.end());
  std::vector<double> out;
  out.reserve(output.size());
  for (int tok : output) {
    const ForwardTrace tr = token_distribution(params, history);
    out.push_back(tr.log_probs(tok));
    history.push_back(tok);
  }
  return out;
}

std::vector<SampledSequence> sample_group(const PolicySnapshot& snapshot, std::span<const int> prompt, int group_size,
                                          const SamplingOptions& options, int eos, std::uint64_t seed) {
  if (group_size < 2) throw std::invalid_argument("sample_group: group size must be at least 2");
  if (options.temperature < 0.0) throw std::invalid_argument("sample_group: temperature must be non-negative");
  if (options.max_length < 1) throw std::invalid_argument("sample_group: max_length must be at least 1");
  const PolicyParams& params = snapshot.params();
  check_tokens(params, prompt);

  std::vector<SampledSequence> group(static_cast<std::size_t>(group_size));
  for (int i = 0; i < group_size; ++i) {
    Rng rng = Rng::stream(seed, {static_cast<std::uint64_t>(i)});
    std::vector<int> history(prompt.begin(), prompt.end());
    SampledSequence& seq = group[static_cast<std::size_t>(i)];
    while (static_cast<int>(seq.tokens.size()) < options.max_length) {
      const ForwardTrace tr = token_distribution(params, history);
      int tok = 0;
      double tempered_logp = 0.0;
      if (options.temperature == 0.0) {
        tr.logits.maxCoeff(&tok);
      } else {
        const auto scaled = (tr.logits.array() / options.temperature).eval();
        const auto shifted = (scaled - scaled.maxCoeff()).eval();
        const double z = shifted.exp().sum();
        const double u = rng.uniform() * z;
        double acc = 0.0;
        tok = static_cast<int>(tr.logits.size()) - 1;
        for (Eigen::Index k = 0; k < tr.logits.size(); ++k) {
          acc += std::exp(shifted(k));
          if (u < acc) {
            tok = static_cast<int>(k);
            break;
          }
        }
        tempered_logp = shifted(tok) - std::log(z);
      }
      seq.tokens.push_back(tok);
      seq.log_probs.push_back(options.record_tempered && options.temperature > 0.0 ? tempered_logp
                                                                                     : tr.log_probs(tok));
      history.push_back(tok);
      if (tok == eos) break;
    }
  }
  return group;
}

PolicyGraph declare_policy(GraphBuilder& builder, const PolicyShape& shape) {
  shape.validate();
  PolicyGraph g;
  g.embedding = builder.input("embedding", shape.vocab_size, shape.embedding_dim);
  for (int l = 0; l < shape.hidden_layers; ++l) {
    g.weights.push_back(builder.input(hidden_weight_name(l), shape.hidden_width, shape.layer_input_width(l)));
    g.biases.push_back(builder.input(hidden_bias_name(l), 1, shape.hidden_width));
  }
  g.unembedding = builder.input("unembedding", shape.vocab_size, shape.hidden_width);
  return g;
}

PolicyOutputs policy_forward(const PolicyGraph& policy, IndexMatrix contexts, const std::vector<int>& tokens) {
  Expr x = embed(policy.embedding, std::move(contexts));
  for (std::size_t l = 0; l < policy.weights.size(); ++l) x = tanh(add_row(matmul(x, transpose(policy.weights[l])), policy.biases[l]));
  PolicyOutputs out;
  out.logits = matmul(x, transpose(policy.unembedding));
  out.log_probs = log_softmax(out.logits);
  out.token_log_probs = pick(out.log_probs, tokens);
  return out;
}

IndexMatrix rollout_contexts(std::span<const int> prompt, std::span<const int> output, int window) {
  IndexMatrix ctx(static_cast<Eigen::Index>(output.size()), window);
  std::vector<int> history(prompt.begin(), prompt.end());
  for (std::size_t t = 0; t < output.size(); ++t) {
    const auto w = context_window(history, window);
    for (int c = 0; c < window; ++c) ctx(static_cast<Eigen::Index>(t), c) = w[static_cast<std::size_t>(c)];
    history.push_back(output[t]);
  }
  return ctx;
}

LayerJacobians numerical_layer_jacobians(const PolicyParams& params, std::span<const int> context,
                                         JacobianMethod method, double step) {
  const PolicyShape& s = params.shape;
  if (s.hidden_width > kJacobianMaxWidth)
    throw std::invalid_argument("layer jacobians: hidden width " + std::to_string(s.hidden_width) + " exceeds 32");
  for (int l = 0; l < s.hidden_layers; ++l) {
    const int count = s.hidden_width * s.layer_input_width(l) + s.hidden_width;
    if (count > kJacobianMaxLayerParams)
      throw std::invalid_argument("layer jacobians: layer " + std::to_string(l) + " has " + std::to_string(count) +
                                  " parameters, cap is 4096");
  }

  LayerJacobians out;
  out.trace = token_distribution(params, context);
  const ForwardTrace& tr = out.trace;
  const int h = s.hidden_width;
  auto layer_in = [&](int l) -> const RowVector& {
    return l == 0 ? tr.input : tr.activations[static_cast<std::size_t>(l - 1)];
  };
  auto W = [&](int l) -> const Matrix& { return params.weights[static_cast<std::size_t>(l)]; };
  auto B = [&](int l) -> const Matrix& { return params.biases[static_cast<std::size_t>(l)]; };

  if (method == JacobianMethod::ChainRule) {
    out.unembedding = params.unembedding;
    for (int l = 1; l < s.hidden_layers; ++l) {
      const RowVector slope = 1.0 - tr.activations[static_cast<std::size_t>(l)].array().square();
      out.hidden.push_back(slope.transpose().asDiagonal() * W(l));
    }
    for (int l = 0; l < s.hidden_layers; ++l) {
      const RowVector& x = layer_in(l);
      const RowVector slope = 1.0 - tr.activations[static_cast<std::size_t>(l)].array().square();
      const Eigen::Index in = x.size();
      Matrix g = Matrix::Zero(h, h * in + h);
      for (int r = 0; r < h; ++r) {
        g.block(r, r * in, 1, in) = slope(r) * x;
        g(r, h * in + r) = slope(r);
      }
      out.parameter.push_back(std::move(g));
    }
    return out;
  }

  // Central differences, one input coordinate per column.
  auto fd = [&](Eigen::Index outputs, Eigen::Index inputs, auto&& eval) {
    Matrix jac(outputs, inputs);
    for (Eigen::Index c = 0; c < inputs; ++c) jac.col(c) = ((eval(c, step) - eval(c, -step)) / (2.0 * step)).transpose();
    return jac;
  };
  const RowVector& last = tr.activations.back();
  out.unembedding = fd(s.vocab_size, h, [&](Eigen::Index c, double d) {
    RowVector a = last;
    a(c) += d;
    return RowVector(a * params.unembedding.transpose());
  });
  for (int l = 1; l < s.hidden_layers; ++l) {
    const RowVector& a0 = tr.activations[static_cast<std::size_t>(l - 1)];
    out.hidden.push_back(fd(h, h, [&](Eigen::Index c, double d) {
      RowVector a = a0;
      a(c) += d;
      return layer_forward(W(l), B(l), a);
    }));
  }
  for (int l = 0; l < s.hidden_layers; ++l) {
    const RowVector& x = layer_in(l);
    const Eigen::Index in = x.size();
    out.parameter.push_back(fd(h, h * in + h, [&](Eigen::Index c, double d) {
      Matrix w = W(l);
      Matrix b = B(l);
      if (c < h * in)
        w(c / in, c % in) += d;
      else
        b(0, c - h * in) += d;
      return layer_forward(w, b, x);
    }));
  }
  return out;
}

namespace {

constexpr const char* kCheckpointMagic = "trgrpo-checkpoint";
constexpr int kCheckpointVersion = 1;

void write_double(std::ostream& os, double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  os.write(buf, res.ptr - buf);
}

}  // namespace

std::string checkpoint_string(const PolicyParams& params) {
  std::ostringstream os;
  const PolicyShape& s = params.shape;
  os << kCheckpointMagic << " " << kCheckpointVersion << "\n";
  os << "shape " << s.vocab_size << " " << s.embedding_dim << " " << s.context_window << " " << s.hidden_width << " "
     << s.hidden_layers << "\n";
  for (const auto& name : params.names()) {
    const Matrix& m = params.array(name);
    os << "array " << name << " " << m.rows() << " " << m.cols() << "\n";
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) {
        if (c) os << ' ';
        write_double(os, m(r, c));
      }
      os << "\n";
    }
  }
  os << "end\n";
  return os.str();
}

PolicyParams parse_checkpoint(const std::string& text) {
  std::istringstream is(text);
  std::string magic;
  int version = 0;
  if (!(is >> magic >> version) || magic != kCheckpointMagic) throw std::runtime_error("checkpoint: bad header");
  if (version != kCheckpointVersion) throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  std::string tag;
  PolicyShape s;
  if (!(is >> tag >> s.vocab_size >> s.embedding_dim >> s.context_window >> s.hidden_width >> s.hidden_layers) ||
      tag != "shape")
    throw std::runtime_error("checkpoint: bad shape line");
  PolicyParams p = PolicyParams::zeros(s);
  for (const auto& expected : p.names()) {
    std::string name;
    Eigen::Index rows = 0, cols = 0;
    if (!(is >> tag >> name >> rows >> cols) || tag != "array" || name != expected)
      throw std::runtime_error("checkpoint: expected array '" + expected + "'");
    Matrix& m = p.array(name);
    if (rows != m.rows() || cols != m.cols()) throw std::runtime_error("checkpoint: shape mismatch for '" + name + "'");
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      std::string tok;
      if (!(is >> tok)) throw std::runtime_error("checkpoint: truncated array '" + name + "'");
      double v = 0.0;
      auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
      if (res.ec != std::errc() || res.ptr != tok.data() + tok.size())
        throw std::runtime_error("checkpoint: bad value '" + tok + "' in '" + name + "'");
      m.data()[i] = v;
    }
  }
  if (!(is >> tag) || tag != "end") throw std::runtime_error("checkpoint: missing end marker");
  return p;
}

void save_checkpoint(const PolicyParams& params, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write checkpoint " + path.string());
  os << checkpoint_string(params);
  if (!os) throw std::runtime_error("failed writing checkpoint " + path.string());
}

PolicyParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read checkpoint " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse_checkpoint(ss.str());
}

}  // namespace trgrpo
