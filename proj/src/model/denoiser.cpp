#include "frigid/denoiser.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

namespace frigid::model {

using nn::AttnSegment;
using nn::Var;

double NoiseSchedule::alpha(double t) const {
  if (!(t >= 0.0 && t <= 1.0)) throw DomainError("alpha: t must lie in [0, 1]");
  if (t == 0.0) return alpha_max;
  if (t == 1.0) return alpha_min;
  return std::exp((1.0 - t) * std::log(alpha_max) + t * std::log(alpha_min));
}

tok::TokenSequence corrupt(const tok::TokenSequence& x0, double t, const NoiseSchedule& schedule, const tok::Vocabulary& v,
                           Rng& rng) {
  const double p = 1.0 - schedule.alpha(t);
  tok::TokenSequence xt = x0;
  for (auto& id : xt.ids) {
    if (id == v.mask()) throw std::invalid_argument("corrupt: input already contains [MASK]");
    if (v.is_special(id)) continue;
    if (rng.uniform() < p) id = v.mask();
  }
  return xt;
}

ModelConfig ModelConfig::desk() { return ModelConfig{}; }

ModelConfig ModelConfig::full() {
  ModelConfig c;
  c.n_layers = 12;
  c.d_model = 768;
  c.n_heads = 12;
  c.d_ff = 3072;
  c.max_len = 256;
  c.vocab_size = 1880;
  return c;
}

void ModelConfig::validate() const {
  auto need = [](bool ok, const char* what) {
    if (!ok) throw std::invalid_argument(std::string("model config: ") + what);
  };
  need(n_layers >= 1, "n_layers must be positive");
  need(d_model >= 1 && n_heads >= 1 && d_model % n_heads == 0, "d_model must be divisible by n_heads");
  need(d_ff >= 1, "d_ff must be positive");
  need(max_len >= 3, "max_len must be at least 3");
  need(vocab_size >= 5, "vocab_size must exceed the special tokens");
  need(dropout >= 0.0 && dropout < 1.0, "dropout must be in [0, 1)");
  need(cond_dropout_fp >= 0.0 && cond_dropout_fp <= 1.0, "cond_dropout_fp must be in [0, 1]");
  need(n_elements == chem::kNumElementSlots, "n_elements must be 30");
  need(max_count >= 1, "max_count must be positive");
  need(fp_bits >= 1, "fp_bits must be positive");
  need(fp_max_active >= 1, "fp_max_active must be positive");
  need(fp_attn_layers >= 0, "fp_attn_layers must be non-negative");
  need(fp_threshold >= 0.0 && fp_threshold <= 1.0, "fp_threshold must be in [0, 1]");
}

std::string ModelConfig::to_json() const {
  nlohmann::ordered_json j = {
      {"n_layers", n_layers},       {"d_model", d_model},
      {"n_heads", n_heads},         {"d_ff", d_ff},
      {"max_len", max_len},         {"vocab_size", vocab_size},
      {"dropout", dropout},         {"cond_dropout_fp", cond_dropout_fp},
      {"n_elements", n_elements},   {"max_count", max_count},
      {"fp_bits", fp_bits},         {"fp_max_active", fp_max_active},
      {"fp_attn_layers", fp_attn_layers}, {"fp_threshold", fp_threshold},
  };
  return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  ModelConfig c;
  c.n_layers = j.at("n_layers");
  c.d_model = j.at("d_model");
  c.n_heads = j.at("n_heads");
  c.d_ff = j.at("d_ff");
  c.max_len = j.at("max_len");
  c.vocab_size = j.at("vocab_size");
  c.dropout = j.at("dropout");
  c.cond_dropout_fp = j.at("cond_dropout_fp");
  c.n_elements = j.at("n_elements");
  c.max_count = j.at("max_count");
  c.fp_bits = j.at("fp_bits");
  c.fp_max_active = j.at("fp_max_active");
  c.fp_attn_layers = j.at("fp_attn_layers");
  c.fp_threshold = j.at("fp_threshold");
  c.validate();
  return c;
}

Condition make_condition(const chem::Formula& formula, const chem::Fingerprint& fp, int max_active) {
  Condition c;
  for (std::size_t i = 0; i < c.counts.size(); ++i) {
    if (formula.counts[i] < 0) throw std::invalid_argument("negative element count");
    c.counts[i] = formula.counts[i];
  }
  const auto& bits = fp.bits();
  const std::size_t n = std::min(bits.size(), static_cast<std::size_t>(std::max(max_active, 0)));
  c.bits.assign(bits.begin(), bits.begin() + static_cast<std::ptrdiff_t>(n));
  return c;
}

template <typename T>
Denoiser<T>::Denoiser(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed);
  const int d = cfg_.d_model;
  // Handles are raw pointers into params_, so its capacity is fixed up front.
  params_.reserve(static_cast<std::size_t>(16 + 16 * cfg_.fp_attn_layers + 26 * cfg_.n_layers));
  const auto cap = params_.capacity();

  tok_emb_ = &add_param("tok_emb", cfg_.vocab_size, d, 0.02, 0, rng);
  pos_emb_ = &add_param("pos_emb", cfg_.max_len, d, 0.02, 0, rng);
  emb_ln_ = make_norm("emb_ln", d, rng);
  elem_emb_ = &add_param("formula.elem_emb", cfg_.n_elements, d, 0.02, 0, rng);
  count_emb_ = &add_param("formula.count_emb", cfg_.max_count + 1, d, 0.02, 0, rng);
  slot_emb_ = &add_param("formula.slot_emb", cfg_.n_elements, d, 0.02, 0, rng);
  formula_ln_ = make_norm("formula.ln", d, rng);
  bit_emb_ = &add_param("fp.bit_emb", cfg_.fp_bits, d, 0.02, 0, rng);
  for (int l = 0; l < cfg_.fp_attn_layers; ++l) {
    const std::string p = "fp.layer" + std::to_string(l) + ".";
    FpLayer fl;
    fl.attn = make_attn(p + "attn", rng);
    fl.ln1 = make_norm(p + "ln1", d, rng);
    fl.ff1 = make_linear(p + "ff1", d, cfg_.d_ff, rng);
    fl.ff2 = make_linear(p + "ff2", cfg_.d_ff, d, rng);
    fl.ln2 = make_norm(p + "ln2", d, rng);
    fp_layers_.push_back(fl);
  }
  for (int l = 0; l < cfg_.n_layers; ++l) {
    const std::string p = "block" + std::to_string(l) + ".";
    Block b;
    b.self = make_attn(p + "self", rng);
    b.ln1 = make_norm(p + "ln1", d, rng);
    b.cross = make_attn(p + "cross", rng);
    b.ln2 = make_norm(p + "ln2", d, rng);
    b.ff1 = make_linear(p + "ff1", d, cfg_.d_ff, rng);
    b.ff2 = make_linear(p + "ff2", cfg_.d_ff, d, rng);
    b.ln3 = make_norm(p + "ln3", d, rng);
    blocks_.push_back(b);
  }
  out_ = make_linear("out", d, cfg_.vocab_size, rng);
  if (params_.capacity() != cap) throw std::logic_error("parameter storage reallocated");
}

template <typename T>
nn::Param<T>& Denoiser<T>::add_param(const std::string& name, int rows, int cols, double stddev, T fill, Rng& rng) {
  nn::Param<T> p;
  p.name = name;
  p.value.resize(rows, cols);
  for (Eigen::Index i = 0; i < p.value.size(); ++i) {
    p.value.data()[i] = stddev > 0 ? static_cast<T>(stddev * rng.normal()) : fill;
  }
  p.grad = nn::Mat<T>::Zero(rows, cols);
  params_.push_back(std::move(p));
  return params_.back();
}

template <typename T>
typename Denoiser<T>::Linear Denoiser<T>::make_linear(const std::string& name, int in, int out, Rng& rng) {
  Linear l;
  l.w = &add_param(name + ".w", in, out, 0.02, 0, rng);
  l.b = &add_param(name + ".b", 1, out, 0.0, 0, rng);
  return l;
}

template <typename T>
typename Denoiser<T>::Norm Denoiser<T>::make_norm(const std::string& name, int d, Rng& rng) {
  Norm n;
  n.g = &add_param(name + ".g", 1, d, 0.0, 1, rng);
  n.b = &add_param(name + ".b", 1, d, 0.0, 0, rng);
  return n;
}

template <typename T>
typename Denoiser<T>::Attn Denoiser<T>::make_attn(const std::string& name, Rng& rng) {
  const int d = cfg_.d_model;
  Attn a;
  a.q = make_linear(name + ".q", d, d, rng);
  a.k = make_linear(name + ".k", d, d, rng);
  a.v = make_linear(name + ".v", d, d, rng);
  a.o = make_linear(name + ".o", d, d, rng);
  return a;
}

template <typename T>
nn::Param<T>& Denoiser<T>::param(const std::string& name) {
  for (auto& p : params_) {
    if (p.name == name) return p;
  }
  throw std::out_of_range("no parameter named " + name);
}

template <typename T>
std::size_t Denoiser<T>::num_parameters() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
  return n;
}

template <typename T>
Var Denoiser<T>::lin(Tape& t, Var x, const Linear& l) {
  return nn::linear(t, x, t.param(*l.w), t.param(*l.b));
}

template <typename T>
Var Denoiser<T>::norm(Tape& t, Var x, const Norm& n) {
  return nn::layer_norm(t, x, t.param(*n.g), t.param(*n.b));
}

template <typename T>
Var Denoiser<T>::residual_norm(Tape& t, Var x, Var sub, const Norm& n, bool training, Rng& rng) {
  if (training) sub = nn::dropout(t, sub, cfg_.dropout, rng);
  return norm(t, nn::add(t, x, sub), n);
}

template <typename T>
typename Denoiser<T>::Memory Denoiser<T>::encode(Tape& t, const std::vector<const Condition*>& conds,
                                                 const std::vector<bool>& drop_fp, bool training, Rng& rng) {
  if (drop_fp.size() != conds.size()) throw ShapeMismatch("encode: drop_fp size mismatch");
  const int nc = static_cast<int>(conds.size());

  // Formula rows: one per element present, element + count + slot embeddings.
  std::vector<int> elem_ids, count_ids;
  std::vector<int> f_off(static_cast<std::size_t>(nc)), f_len(static_cast<std::size_t>(nc));
  for (int c = 0; c < nc; ++c) {
    f_off[c] = static_cast<int>(elem_ids.size());
    for (int e = 0; e < cfg_.n_elements; ++e) {
      const int n = conds[c]->counts[static_cast<std::size_t>(e)];
      if (n < 0) throw ShapeMismatch("negative element count");
      if (n == 0) continue;
      elem_ids.push_back(e);
      count_ids.push_back(std::min(n, cfg_.max_count));
    }
    f_len[c] = static_cast<int>(elem_ids.size()) - f_off[c];
  }
  Var formula = nn::add(t, nn::add(t, nn::embedding(t, t.param(*elem_emb_), elem_ids),
                                   nn::embedding(t, t.param(*count_emb_), count_ids)),
                        nn::embedding(t, t.param(*slot_emb_), elem_ids));
  formula = norm(t, formula, formula_ln_);

  // Fingerprint rows: bit embeddings refined by self-attention within each
  // condition, without positions.
  std::vector<int> bit_ids;
  std::vector<AttnSegment> fp_segs;
  std::vector<int> p_off(static_cast<std::size_t>(nc), 0), p_len(static_cast<std::size_t>(nc), 0);
  for (int c = 0; c < nc; ++c) {
    if (drop_fp[c]) continue;
    const auto& bits = conds[c]->bits;
    if (static_cast<int>(bits.size()) > cfg_.fp_max_active) throw ShapeMismatch("too many active fingerprint bits");
    p_off[c] = static_cast<int>(bit_ids.size());
    for (std::size_t i = 0; i < bits.size(); ++i) {
      if (bits[i] < 0 || bits[i] >= cfg_.fp_bits || (i > 0 && bits[i] <= bits[i - 1])) {
        throw ShapeMismatch("fingerprint bits must be strictly increasing and in range");
      }
      bit_ids.push_back(bits[i]);
    }
    p_len[c] = static_cast<int>(bits.size());
    fp_segs.push_back({p_off[c], p_len[c], p_off[c], p_len[c]});
  }
  Var fp = nn::embedding(t, t.param(*bit_emb_), bit_ids);
  const int h = cfg_.n_heads;
  for (const auto& fl : fp_layers_) {
    Var a = nn::attention(t, lin(t, fp, fl.attn.q), lin(t, fp, fl.attn.k), lin(t, fp, fl.attn.v), h, fp_segs);
    fp = residual_norm(t, fp, lin(t, a, fl.attn.o), fl.ln1, training, rng);
    Var f = lin(t, nn::gelu(t, lin(t, fp, fl.ff1)), fl.ff2);
    fp = residual_norm(t, fp, f, fl.ln2, training, rng);
  }

  // Interleave so each condition's rows are contiguous: [formula; fp].
  const int nf = static_cast<int>(elem_ids.size());
  std::vector<int> order;
  Memory mem;
  for (int c = 0; c < nc; ++c) {
    AttnSegment s;
    s.k0 = static_cast<int>(order.size());
    for (int i = 0; i < f_len[c]; ++i) order.push_back(f_off[c] + i);
    for (int i = 0; i < p_len[c]; ++i) order.push_back(nf + p_off[c] + i);
    s.kn = static_cast<int>(order.size()) - s.k0;
    mem.segs.push_back(s);
  }
  Var rows = nn::gather_rows(t, nn::concat_rows(t, {formula, fp}), order);
  for (const auto& b : blocks_) {
    mem.keys.push_back(lin(t, rows, b.cross.k));
    mem.values.push_back(lin(t, rows, b.cross.v));
  }
  return mem;
}

template <typename T>
Var Denoiser<T>::forward(Tape& t, const std::vector<const std::vector<int>*>& seqs, const std::vector<int>& cond_of_seq,
                         const Memory& mem, bool training, Rng& rng) {
  if (cond_of_seq.size() != seqs.size()) throw ShapeMismatch("forward: cond_of_seq size mismatch");
  std::vector<int> ids, pos;
  std::vector<AttnSegment> self_segs, cross_segs;
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    const auto& s = *seqs[i];
    if (static_cast<int>(s.size()) > cfg_.max_len) throw ShapeMismatch("sequence longer than max_len");
    const int c = cond_of_seq[i];
    if (c < 0 || c >= static_cast<int>(mem.segs.size())) throw ShapeMismatch("condition index out of range");
    const int q0 = static_cast<int>(ids.size());
    for (std::size_t p = 0; p < s.size(); ++p) {
      if (s[p] < 0 || s[p] >= cfg_.vocab_size) throw ShapeMismatch("token id out of range");
      ids.push_back(s[p]);
      pos.push_back(static_cast<int>(p));
    }
    const int qn = static_cast<int>(s.size());
    self_segs.push_back({q0, qn, q0, qn});
    cross_segs.push_back({q0, qn, mem.segs[static_cast<std::size_t>(c)].k0, mem.segs[static_cast<std::size_t>(c)].kn});
  }
  Var x = nn::add(t, nn::embedding(t, t.param(*tok_emb_), ids), nn::embedding(t, t.param(*pos_emb_), pos));
  x = norm(t, x, emb_ln_);
  if (training) x = nn::dropout(t, x, cfg_.dropout, rng);
  const int h = cfg_.n_heads;
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    const Block& b = blocks_[l];
    Var a = nn::attention(t, lin(t, x, b.self.q), lin(t, x, b.self.k), lin(t, x, b.self.v), h, self_segs);
    x = residual_norm(t, x, lin(t, a, b.self.o), b.ln1, training, rng);
    Var c = nn::attention(t, lin(t, x, b.cross.q), mem.keys[l], mem.values[l], h, cross_segs);
    x = residual_norm(t, x, lin(t, c, b.cross.o), b.ln2, training, rng);
    Var f = lin(t, nn::gelu(t, lin(t, x, b.ff1)), b.ff2);
    x = residual_norm(t, x, f, b.ln3, training, rng);
  }
  return lin(t, x, out_);
}

template <typename T>
nn::Mat<T> Denoiser<T>::logits(const std::vector<std::vector<int>>& seqs, const std::vector<Condition>& conds) {
  if (seqs.size() != conds.size()) throw ShapeMismatch("logits: one condition per sequence expected");
  Tape t(false);
  Rng rng(0);
  std::vector<const Condition*> cp;
  std::vector<const std::vector<int>*> sp;
  std::vector<int> idx;
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    cp.push_back(&conds[i]);
    sp.push_back(&seqs[i]);
    idx.push_back(static_cast<int>(i));
  }
  const auto mem = encode(t, cp, std::vector<bool>(cp.size(), false), false, rng);
  return t.value(forward(t, sp, idx, mem, false, rng));
}

template class Denoiser<float>;
template class Denoiser<double>;

template <typename T>
Var masked_nll(nn::Tape<T>& tape, Denoiser<T>& model, const std::vector<std::vector<int>>& xt,
               const std::vector<const Example*>& batch, const std::vector<bool>& drop_fp, int mask_id, bool training,
               Rng& rng, long* masked_count) {
  if (xt.size() != batch.size()) throw ShapeMismatch("masked_nll: batch size mismatch");
  std::vector<int> rows, targets;
  int offset = 0;
  for (std::size_t i = 0; i < xt.size(); ++i) {
    const auto& x0 = batch[i]->x0.ids;
    if (x0.size() != xt[i].size()) throw ShapeMismatch("masked_nll: corrupted length differs");
    for (std::size_t p = 0; p < xt[i].size(); ++p) {
      if (xt[i][p] == mask_id) {
        rows.push_back(offset + static_cast<int>(p));
        targets.push_back(x0[p]);
      }
    }
    offset += static_cast<int>(xt[i].size());
  }
  if (masked_count) *masked_count = static_cast<long>(rows.size());
  if (rows.empty()) return tape.constant(nn::Mat<T>::Zero(1, 1));
  std::vector<const Condition*> conds;
  std::vector<const std::vector<int>*> seqs;
  std::vector<int> idx;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    conds.push_back(&batch[i]->cond);
    seqs.push_back(&xt[i]);
    idx.push_back(static_cast<int>(i));
  }
  const auto mem = model.encode(tape, conds, drop_fp, training, rng);
  Var logits = model.forward(tape, seqs, idx, mem, training, rng);
  const T denom = static_cast<T>(rows.size());
  return nn::cross_entropy(tape, logits, std::move(rows), std::move(targets), denom);
}

template <typename T>
Var mdlm_loss(nn::Tape<T>& tape, Denoiser<T>& model, const std::vector<const Example*>& batch,
              const NoiseSchedule& schedule, const tok::Vocabulary& v, bool training, Rng& rng, LossStats* stats) {
  if (batch.size() < 2) throw std::invalid_argument("mdlm_loss: antithetic pairing needs a batch of at least 2");
  std::vector<std::vector<int>> xt(batch.size());
  std::vector<bool> drop(batch.size(), false);
  double u = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (i % 2 == 0) u = rng.uniform();
    const double t = i % 2 == 0 ? u : 1.0 - u;
    xt[i] = corrupt(batch[i]->x0, t, schedule, v, rng).ids;
    if (training) drop[i] = rng.bernoulli(model.config().cond_dropout_fp);
  }
  long masked = 0;
  Var loss = masked_nll(tape, model, xt, batch, drop, v.mask(), training, rng, &masked);
  if (stats) {
    stats->masked += masked;
    if (masked == 0) ++stats->no_mask_batches;
  }
  return loss;
}

template Var masked_nll<float>(nn::Tape<float>&, Denoiser<float>&, const std::vector<std::vector<int>>&,
                               const std::vector<const Example*>&, const std::vector<bool>&, int, bool, Rng&, long*);
template Var masked_nll<double>(nn::Tape<double>&, Denoiser<double>&, const std::vector<std::vector<int>>&,
                                const std::vector<const Example*>&, const std::vector<bool>&, int, bool, Rng&, long*);
template Var mdlm_loss<float>(nn::Tape<float>&, Denoiser<float>&, const std::vector<const Example*>&,
                              const NoiseSchedule&, const tok::Vocabulary&, bool, Rng&, LossStats*);
template Var mdlm_loss<double>(nn::Tape<double>&, Denoiser<double>&, const std::vector<const Example*>&,
                               const NoiseSchedule&, const tok::Vocabulary&, bool, Rng&, LossStats*);

GradCheckResult gradient_check(const ModelConfig& cfg, const std::vector<Example>& batch, const tok::Vocabulary& v,
                               std::uint64_t seed, int coords, double h) {
  Denoiser<double> model(cfg, seed);
  Rng rng(seed ^ 0x6a09e667f3bcc908ULL);
  std::vector<const Example*> bp;
  for (const auto& e : batch) bp.push_back(&e);
  // One fixed corruption at t = 0.5 shared by every evaluation.
  NoiseSchedule sched;
  std::vector<std::vector<int>> xt;
  for (const auto& e : batch) xt.push_back(corrupt(e.x0, 0.5, sched, v, rng).ids);
  const std::vector<bool> drop(batch.size(), false);
  auto eval = [&] {
    nn::Tape<double> t(false);
    Rng r(0);
    return t.value(masked_nll(t, model, xt, bp, drop, v.mask(), false, r))(0, 0);
  };

  for (auto& p : model.params()) p.grad.setZero();
  {
    nn::Tape<double> t(true);
    Rng r(0);
    t.backward(masked_nll(t, model, xt, bp, drop, v.mask(), false, r));
  }

  GradCheckResult res;
  for (const auto& p : model.params()) res.max_abs_grad = std::max(res.max_abs_grad, p.grad.cwiseAbs().maxCoeff());
  // Coordinates: a random parameter, then mostly coordinates that actually
  // receive gradient so embedding tables do not dominate with exact zeros.
  for (int k = 0; k < coords; ++k) {
    auto& p = model.params()[rng.below(model.params().size())];
    const auto n = static_cast<std::uint64_t>(p.value.size());
    std::vector<Eigen::Index> live;
    for (Eigen::Index i = 0; i < p.grad.size(); ++i) {
      if (p.grad.data()[i] != 0.0) live.push_back(i);
    }
    Eigen::Index i = static_cast<Eigen::Index>(rng.below(n));
    if (!live.empty() && rng.uniform() < 0.8) i = live[rng.below(live.size())];
    double& x = p.value.data()[i];
    const double orig = x;
    x = orig + h;
    const double fp = eval();
    x = orig - h;
    const double fm = eval();
    x = orig;
    const double numeric = (fp - fm) / (2 * h);
    const double analytic = p.grad.data()[i];
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
    res.max_rel_error = std::max(res.max_rel_error, std::abs(analytic - numeric) / denom);
    ++res.coords_checked;
  }
  return res;
}

}  // namespace frigid::model
