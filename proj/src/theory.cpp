#include "trgrpo/theory.hpp"

#include "trgrpo/rng.hpp"

#include <algorithm>
#include <cstdio>
#include <map>
#include <sstream>

namespace trgrpo {

BoundConstants bound_constants(const LayerJacobians& jac) {
  BoundConstants c;
  c.layers = static_cast<int>(jac.parameter.size());
  const auto w = right_multiplication_gains(jac.unembedding);
  c.a_W = w.lower;
  c.b_W = w.upper;
  for (const Matrix& g : jac.parameter) {
    const auto gains = right_multiplication_gains(g);
    c.a_G.push_back(gains.lower);
    c.b_G.push_back(gains.upper);
  }
  for (const Matrix& j : jac.hidden) {
    const auto gains = right_multiplication_gains(j);
    c.a_J.push_back(gains.lower);
    c.b_J.push_back(gains.upper);
  }
  c.a_J.push_back(1.0);
  c.b_J.push_back(1.0);
  return c;
}

BoundConstants bound_constants(const PolicyParams& params, std::span<const int> context) {
  return bound_constants(numerical_layer_jacobians(params, context, JacobianMethod::ChainRule));
}

BoundReport token_gradient_bound(const TokenTerm& term, double w, const BoundConstants& k, double measured_g_norm) {
  if (k.layers < 1) throw std::invalid_argument("token_gradient_bound: constants carry no layers");
  double lower_sum = 0.0;
  double upper_sum = 0.0;
  for (int l = 0; l < k.layers; ++l) {
    double a = k.a_W * k.a_G[static_cast<std::size_t>(l)];
    double b = k.b_W * k.b_G[static_cast<std::size_t>(l)];
    for (int j = l; j < k.layers; ++j) {
      a *= k.a_J[static_cast<std::size_t>(j)];
      b *= k.b_J[static_cast<std::size_t>(j)];
    }
    lower_sum += a;
    upper_sum += b;
  }
  const double factor = w * (1.0 - term.pi_theta) * std::abs(term.gamma);
  BoundReport r;
  r.lower = factor / std::sqrt(static_cast<double>(k.layers)) * lower_sum;
  r.upper = std::sqrt(2.0) * factor * upper_sum;
  r.measured = measured_g_norm;
  r.slack_lower = r.measured - r.lower;
  r.slack_upper = r.upper - r.measured;
  r.pass = r.lower - kBoundSlack <= r.measured && r.measured <= r.upper + kBoundSlack;
  return r;
}

Gradients log_prob_gradient(const PolicyParams& params, std::span<const int> context, int token) {
  if (token < 0 || token >= params.shape.vocab_size) throw std::out_of_range("log_prob_gradient: token out of range");
  GraphBuilder b;
  const PolicyGraph pg = declare_policy(b, params.shape);
  const auto window = context_window(context, params.shape.context_window);
  IndexMatrix ctx(1, params.shape.context_window);
  for (int c = 0; c < params.shape.context_window; ++c) ctx(0, c) = window[static_cast<std::size_t>(c)];
  const PolicyOutputs out = policy_forward(pg, ctx, {token});
  const Graph g = b.build(sum(out.token_log_probs));
  return g.evaluate(params.bindings()).gradient();
}

double hidden_gradient_norm(const PolicyParams& params, const Gradients& grads) {
  double ss = 0.0;
  for (int l = 0; l < params.shape.hidden_layers; ++l) {
    ss += grads.at(hidden_weight_name(l)).squaredNorm();
    ss += grads.at(hidden_bias_name(l)).squaredNorm();
  }
  return std::sqrt(ss);
}

double sharpness_surrogate(double loss_value, double grad_norm, const SharpnessConfig& cfg) {
  if (grad_norm < 0.0) throw std::invalid_argument("sharpness_surrogate: negative gradient norm");
  if (cfg.rho < 0.0) throw std::invalid_argument("sharpness_surrogate: negative radius");
  return loss_value + cfg.rho * grad_norm;
}

int TheoryReport::failures() const {
  return static_cast<int>(std::count_if(rows.begin(), rows.end(), [](const CheckRow& r) { return !r.pass; }));
}

std::string TheoryReport::summary() const {
  struct Agg {
    int count = 0;
    int failed = 0;
    double min_slack = std::numeric_limits<double>::infinity();
  };
  std::map<std::string, Agg> by;
  std::vector<std::string> order;
  for (const CheckRow& r : rows) {
    if (!by.count(r.check)) order.push_back(r.check);
    Agg& a = by[r.check];
    ++a.count;
    a.failed += !r.pass;
    a.min_slack = std::min({a.min_slack, r.measured - r.lower, r.upper - r.measured});
  }
  std::ostringstream os;
  char buf[256];
  for (const auto& name : order) {
    const Agg& a = by[name];
    std::snprintf(buf, sizeof(buf), "%-22s %6d checks  %4d violations  min slack %.3e  %s\n", name.c_str(), a.count,
                  a.failed, a.min_slack, a.failed ? "FAIL" : "PASS");
    os << buf;
  }
  os << (failures() ? "theory suite: FAIL\n" : "theory suite: all checks pass\n");
  return os.str();
}

std::string TheoryReport::csv() const {
  std::ostringstream os;
  os << "check,index,lower,measured,upper,slack_lower,slack_upper,pass\n";
  char buf[256];
  for (const CheckRow& r : rows) {
    std::snprintf(buf, sizeof(buf), "%s,%d,%.17g,%.17g,%.17g,%.17g,%.17g,%d\n", r.check.c_str(), r.index, r.lower,
                  r.measured, r.upper, r.measured - r.lower, r.upper - r.measured, r.pass ? 1 : 0);
    os << buf;
  }
  return os.str();
}

namespace {

Matrix random_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols, double scale) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-scale, scale);
  return m;
}

RowVector random_distribution(Rng& rng, int n) {
  const double sharpness = rng.uniform(0.0, 20.0);
  RowVector z(n);
  for (int i = 0; i < n; ++i) z(i) = sharpness * rng.uniform(-1.0, 1.0);
  z.array() -= z.maxCoeff();
  z = z.array().exp().matrix();
  return z / z.sum();
}

PolicyShape random_shape(Rng& rng) {
  PolicyShape s;
  s.vocab_size = rng.integer(2, 16);
  s.embedding_dim = rng.integer(1, 4);
  s.context_window = rng.integer(1, 4);
  s.hidden_width = rng.integer(2, 12);
  s.hidden_layers = rng.integer(1, 3);
  return s;
}

std::vector<int> random_context(Rng& rng, int vocab) {
  std::vector<int> ctx(static_cast<std::size_t>(rng.integer(0, 6)));
  for (int& t : ctx) t = rng.integer(0, vocab - 1);
  return ctx;
}

}  // namespace

TheoryReport run_theory_suite(const TheorySuiteOptions& opt) {
  TheoryReport report;
  auto add = [&](const std::string& check, int index, const Sandwich& s, double slack) {
    report.rows.push_back({check, index, s.lower, s.measured, s.upper, s.holds(slack)});
  };

  // Matrix-chain sandwich.
  for (int i = 0; i < opt.chains; ++i) {
    Rng rng = Rng::stream(opt.seed, {1, static_cast<std::uint64_t>(i)});
    const int m = rng.integer(1, 4);
    std::vector<int> dims(static_cast<std::size_t>(m + 1));
    for (int& d : dims) d = rng.integer(1, 8);
    std::vector<Matrix> chain;
    for (int k = 0; k < m; ++k)
      chain.push_back(random_matrix(rng, dims[static_cast<std::size_t>(k)], dims[static_cast<std::size_t>(k + 1)],
                                    rng.uniform(0.1, 2.0)));
    const RowVector x = random_matrix(rng, 1, dims[0], 1.0);
    add("chain_sandwich", i, matrix_chain_sandwich<double>(x, chain), kBoundSlack);
  }

  // Score-norm sandwich and exact attainment on two-point distributions.
  for (int i = 0; i < opt.distributions; ++i) {
    Rng rng = Rng::stream(opt.seed, {2, static_cast<std::uint64_t>(i)});
    const int n = rng.integer(2, Vocabulary::kMaxSize);
    const RowVector p = random_distribution(rng, n);
    add("score_norm", i, score_norm_bounds(p, rng.integer(0, n - 1)), kBoundSlack);
  }
  for (int i = 0; i < opt.distributions / 10; ++i) {
    Rng rng = Rng::stream(opt.seed, {3, static_cast<std::uint64_t>(i)});
    const int n = rng.integer(2, Vocabulary::kMaxSize);
    const int k = rng.integer(0, n - 1);
    int other = rng.integer(0, n - 2);
    if (other >= k) ++other;
    RowVector p = RowVector::Zero(n);
    p(k) = rng.uniform();
    p(other) = 1.0 - p(k);
    const Sandwich s = score_norm_bounds(p, k);
    report.rows.push_back({"score_binary_attains", i, s.upper, s.measured, s.upper, std::abs(s.measured - s.upper) <= 1e-12});
  }

  // Jacobian routes: chain rule vs central differences, and the chained
  // layer gradient vs autodiff.
  for (int i = 0; i < opt.jacobian_configs; ++i) {
    Rng rng = Rng::stream(opt.seed, {4, static_cast<std::uint64_t>(i)});
    const PolicyShape shape = random_shape(rng);
    const PolicyParams params = PolicyParams::initialize(shape, rng.next(), rng.uniform(0.1, 1.0));
    const auto ctx = random_context(rng, shape.vocab_size);
    const LayerJacobians exact = numerical_layer_jacobians(params, ctx, JacobianMethod::ChainRule);
    const LayerJacobians fd = numerical_layer_jacobians(params, ctx, JacobianMethod::FiniteDifference);
    double diff = (exact.unembedding - fd.unembedding).cwiseAbs().maxCoeff();
    for (std::size_t j = 0; j < exact.hidden.size(); ++j)
      diff = std::max(diff, (exact.hidden[j] - fd.hidden[j]).cwiseAbs().maxCoeff());
    for (std::size_t j = 0; j < exact.parameter.size(); ++j)
      diff = std::max(diff, (exact.parameter[j] - fd.parameter[j]).cwiseAbs().maxCoeff());
    report.rows.push_back({"jacobian_fd_vs_chain", i, 0.0, diff, 1e-6, diff <= 1e-6});

    const int token = rng.integer(0, shape.vocab_size - 1);
    const Gradients grads = log_prob_gradient(params, ctx, token);
    RowVector score = -exact.trace.probs;
    score(token) += 1.0;
    double chain_diff = 0.0;
    for (int l = 0; l < shape.hidden_layers; ++l) {
      RowVector g = score * exact.unembedding;
      for (int j = shape.hidden_layers - 2; j >= l; --j) g = g * exact.hidden[static_cast<std::size_t>(j)];
      g = g * exact.parameter[static_cast<std::size_t>(l)];
      const Matrix& gw = grads.at(hidden_weight_name(l));
      const Matrix& gb = grads.at(hidden_bias_name(l));
      const Eigen::Index nw = gw.size();
      chain_diff = std::max(chain_diff, (g.head(nw) - Eigen::Map<const RowVector>(gw.data(), nw)).cwiseAbs().maxCoeff());
      chain_diff = std::max(chain_diff, (g.tail(gb.size()) - gb.row(0)).cwiseAbs().maxCoeff());
    }
    report.rows.push_back({"layer_chain_vs_autodiff", i, 0.0, chain_diff, 1e-10, chain_diff <= 1e-10});
  }

  // Token-gradient sandwich with pointwise constants.
  for (int i = 0; i < opt.bound_configs; ++i) {
    Rng rng = Rng::stream(opt.seed, {5, static_cast<std::uint64_t>(i)});
    const PolicyShape shape = random_shape(rng);
    const PolicyParams params = PolicyParams::initialize(shape, rng.next(), rng.uniform(0.05, 1.5));
    const auto ctx = random_context(rng, shape.vocab_size);
    const int token = rng.integer(0, shape.vocab_size - 1);
    const double w = rng.uniform(0.5, 1.5);
    const double gamma = i % 10 == 0 ? 0.0 : rng.uniform(-3.0, 3.0);

    const BoundConstants k = bound_constants(params, ctx);
    const ForwardTrace tr = token_distribution(params, ctx);
    TokenTerm term;
    term.pi_theta = tr.probs(token);
    term.gamma = gamma;
    term.weight = w;
    const double measured = w * std::abs(gamma) * hidden_gradient_norm(params, log_prob_gradient(params, ctx, token));
    const BoundReport r = token_gradient_bound(term, w, k, measured);
    report.rows.push_back({"token_gradient_bound", i, r.lower, r.measured, r.upper, r.pass && r.lower >= 0.0});
  }
  return report;
}

}  // namespace trgrpo
