#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "frigid/denoiser.hpp"
#include "frigid/synth.hpp"

using namespace frigid;
using namespace frigid::model;

namespace {

ModelConfig tiny_config(int vocab) {
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 16;
  c.n_heads = 2;
  c.d_ff = 32;
  c.max_len = 48;
  c.vocab_size = vocab;
  c.fp_attn_layers = 2;
  return c;
}

struct Toy {
  std::vector<std::string> corpus;
  tok::Vocabulary vocab;
  std::vector<Example> data;
};

Toy make_toy(std::size_t n, std::uint64_t seed, int vocab = 64) {
  Toy t;
  t.corpus = synth::generate_corpus(n, seed);
  t.vocab = tok::train_bpe(t.corpus, vocab);
  for (const auto& s : t.corpus) {
    const auto m = chem::parse_smiles(s);
    t.data.push_back({tok::encode(s, t.vocab, 48), make_condition(chem::molecular_formula(m), chem::morgan_fingerprint(m))});
  }
  return t;
}

std::vector<const Example*> ptrs(const std::vector<Example>& d, std::size_t n) {
  std::vector<const Example*> out;
  for (std::size_t i = 0; i < n && i < d.size(); ++i) out.push_back(&d[i]);
  return out;
}

}  // namespace

TEST_CASE("schedule endpoints, midpoint and log-affinity") {
  NoiseSchedule s;
  CHECK(s.alpha(0.0) == 1.0);
  CHECK(s.alpha(1.0) == 1e-3);
  CHECK(s.alpha(0.5) == doctest::Approx(std::pow(10.0, -1.5)).epsilon(1e-12));
  CHECK(s.alpha(0.5) == doctest::Approx(0.0316228).epsilon(1e-6));
  const double a = std::log(s.alpha(0.1)), b = std::log(s.alpha(0.4)), c = std::log(s.alpha(0.9));
  CHECK((b - a) / 0.3 == doctest::Approx((c - b) / 0.5).epsilon(1e-12));
  for (int k = 0; k < 20; ++k) CHECK(s.alpha((k + 1) / 20.0) < s.alpha(k / 20.0));
  CHECK_THROWS_AS(s.alpha(-0.01), DomainError);
  CHECK_THROWS_AS(s.alpha(1.5), DomainError);
  CHECK_THROWS_AS(s.alpha(std::nan("")), DomainError);
}

TEST_CASE("corruption marginals and determinism") {
  const auto toy = make_toy(60, 5);
  const auto& v = toy.vocab;
  NoiseSchedule s;
  const auto& x0 = toy.data[0].x0;
  Rng r0(1);
  const auto same = corrupt(x0, 0.0, s, v, r0);
  CHECK(same.ids == x0.ids);
  CHECK(same.atom_spans == x0.atom_spans);

  // Long synthetic sequence: BOS, 1e5 content tokens, EOS.
  tok::TokenSequence big;
  big.ids.push_back(v.bos());
  for (int i = 0; i < 100000; ++i) big.ids.push_back(4 + i % (v.size() - 4));
  big.ids.push_back(v.eos());
  big.atom_spans.resize(big.ids.size());
  for (double t : {1.0, 0.3}) {
    Rng r(7);
    const auto xt = corrupt(big, t, s, v, r);
    CHECK(xt.ids.front() == v.bos());
    CHECK(xt.ids.back() == v.eos());
    long masked = 0;
    for (std::size_t i = 1; i + 1 < xt.size(); ++i) masked += xt.ids[i] == v.mask();
    const double p = 1.0 - s.alpha(t);
    const double frac = static_cast<double>(masked) / 1e5;
    const double sd = std::sqrt(p * (1 - p) / 1e5);
    CHECK(std::abs(frac - p) <= 3 * sd);
  }

  tok::TokenSequence eight;
  eight.ids = {v.bos(), 4, 5, 6, 7, 8, 9, 10, 11, v.eos()};
  eight.atom_spans.resize(eight.ids.size());
  Rng ra(99), rb(99);
  CHECK(corrupt(eight, 0.5, s, v, ra).ids == corrupt(eight, 0.5, s, v, rb).ids);

  auto bad = eight;
  bad.ids[3] = v.mask();
  Rng rc(1);
  CHECK_THROWS(corrupt(bad, 0.5, s, v, rc));
}

TEST_CASE("cross-entropy oracles") {
  nn::Tape<double> tape(false);
  nn::Mat<double> l(1, 2);
  l << 0.0, std::log(3.0);
  auto ce = nn::cross_entropy(tape, tape.constant(l), {0}, {0}, 1.0);
  CHECK(tape.value(ce)(0, 0) == doctest::Approx(std::log(4.0)).epsilon(1e-12));

  nn::Mat<double> hot = nn::Mat<double>::Zero(3, 7);
  hot(0, 2) = hot(1, 5) = hot(2, 0) = 50.0;
  auto h = nn::cross_entropy(tape, tape.constant(hot), {0, 1, 2}, {2, 5, 0}, 3.0);
  CHECK(tape.value(h)(0, 0) < 1e-6);
  CHECK(tape.value(h)(0, 0) >= 0.0);
}

TEST_CASE("uniform model loss equals log vocab size") {
  const auto toy = make_toy(40, 11);
  Denoiser<double> net(tiny_config(toy.vocab.size()), 3);
  net.param("out.w").value.setZero();
  net.param("out.b").value.setZero();
  nn::Tape<double> tape(false);
  Rng rng(4);
  LossStats stats;
  auto loss = mdlm_loss(tape, net, ptrs(toy.data, 8), NoiseSchedule{}, toy.vocab, false, rng, &stats);
  REQUIRE(stats.masked > 0);
  CHECK(tape.value(loss)(0, 0) == doctest::Approx(std::log(static_cast<double>(toy.vocab.size()))).epsilon(1e-9));

  std::vector<Example> one(toy.data.begin(), toy.data.begin() + 1);
  CHECK_THROWS(mdlm_loss(tape, net, ptrs(one, 1), NoiseSchedule{}, toy.vocab, false, rng));
}

TEST_CASE("no masked positions gives zero loss and zero gradients") {
  const auto toy = make_toy(40, 12);
  Denoiser<double> net(tiny_config(toy.vocab.size()), 3);
  const auto batch = ptrs(toy.data, 4);
  std::vector<std::vector<int>> xt;
  for (const auto* e : batch) xt.push_back(e->x0.ids);
  nn::Tape<double> tape(true);
  Rng rng(1);
  long masked = -1;
  auto loss = masked_nll(tape, net, xt, batch, std::vector<bool>(batch.size(), false), toy.vocab.mask(), true, rng, &masked);
  CHECK(masked == 0);
  CHECK(tape.value(loss)(0, 0) == 0.0);
  for (auto& p : net.params()) p.grad.setZero();
  tape.backward(loss);
  for (const auto& p : net.params()) CHECK(p.grad.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("gradient check against central differences") {
  const auto toy = make_toy(40, 21);
  std::vector<Example> batch(toy.data.begin(), toy.data.begin() + 4);
  for (std::uint64_t seed : {1u, 2u}) {
    const auto r = gradient_check(tiny_config(toy.vocab.size()), batch, toy.vocab, seed, 256, 1e-4);
    CHECK(r.coords_checked >= 200);
    CHECK(r.max_abs_grad > 0.0);
    CHECK(r.max_rel_error <= 1e-4);
  }
}

TEST_CASE("linear probe gradient is exact") {
  // loss = 1^T (x w): analytic gradient is x^T 1, matched by differences.
  nn::Param<double> w{"w", nn::Mat<double>(3, 1), {}};
  w.value << 0.3, -1.2, 2.0;
  nn::Mat<double> x(2, 3);
  x << 1.0, 2.0, 3.0, -4.0, 5.0, 0.5;
  auto eval = [&] {
    nn::Tape<double> t(false);
    auto y = nn::matmul(t, t.constant(nn::Mat<double>::Ones(1, 2)), nn::matmul(t, t.constant(x), t.param(w)));
    return t.value(y)(0, 0);
  };
  nn::Tape<double> t(true);
  auto y = nn::matmul(t, t.constant(nn::Mat<double>::Ones(1, 2)), nn::matmul(t, t.constant(x), t.param(w)));
  t.backward(y);
  const double h = 1e-4;
  for (int i = 0; i < 3; ++i) {
    const double keep = w.value(i, 0);
    w.value(i, 0) = keep + h;
    const double up = eval();
    w.value(i, 0) = keep - h;
    const double dn = eval();
    w.value(i, 0) = keep;
    CHECK(std::abs(w.grad(i, 0) - (up - dn) / (2 * h)) < 1e-8);
    CHECK(w.grad(i, 0) == doctest::Approx(x(0, i) + x(1, i)));
  }
}

TEST_CASE("conditioning semantics of the logits") {
  const auto toy = make_toy(40, 31);
  Denoiser<double> net(tiny_config(toy.vocab.size()), 8);
  const auto& ex = toy.data[3];
  REQUIRE(ex.cond.bits.size() >= 3);
  std::vector<int> seq = ex.x0.ids;
  seq[1] = toy.vocab.mask();

  SUBCASE("dropped fingerprint equals empty bit list") {
    Condition empty = ex.cond;
    empty.bits.clear();
    const auto ref = net.logits({seq}, {empty});
    nn::Tape<double> tape(false);
    Rng rng(0);
    auto mem = net.encode(tape, {&ex.cond}, {true}, false, rng);
    auto out = net.forward(tape, {&seq}, {0}, mem, false, rng);
    CHECK((tape.value(out) - ref).cwiseAbs().maxCoeff() == 0.0);
  }

  SUBCASE("bit encoder ignores the order of the active bits") {
    const auto before = net.logits({seq}, {ex.cond});
    // Swapping two active bits' embeddings permutes the encoder input rows.
    auto& emb = net.param("fp.bit_emb").value;
    const int a = ex.cond.bits[0], b = ex.cond.bits[2];
    emb.row(a).swap(emb.row(b));
    const auto after = net.logits({seq}, {ex.cond});
    CHECK((before - after).cwiseAbs().maxCoeff() < 1e-12);
  }

  SUBCASE("identical rows in a batch give identical logits") {
    const auto out = net.logits({seq, seq}, {ex.cond, ex.cond});
    const auto n = static_cast<Eigen::Index>(seq.size());
    CHECK((out.topRows(n) - out.bottomRows(n)).cwiseAbs().maxCoeff() == 0.0);
  }

  SUBCASE("formula changes the logits") {
    Condition other = ex.cond;
    other.counts[0] += 3;
    const auto a = net.logits({seq}, {ex.cond});
    const auto b = net.logits({seq}, {other});
    CHECK((a - b).cwiseAbs().maxCoeff() > 0.0);
  }

  SUBCASE("shape errors") {
    Condition unsorted = ex.cond;
    std::swap(unsorted.bits[0], unsorted.bits[1]);
    CHECK_THROWS_AS(net.logits({seq}, {unsorted}), ShapeMismatch);
    std::vector<int> long_seq(60, 4);
    CHECK_THROWS_AS(net.logits({long_seq}, {ex.cond}), ShapeMismatch);
    CHECK_THROWS_AS(net.logits({seq, seq}, {ex.cond}), ShapeMismatch);
  }
}

TEST_CASE("make_condition keeps the lowest bits") {
  std::vector<int> bits;
  for (int i = 0; i < 300; ++i) bits.push_back(4095 - i * 7);
  chem::Fingerprint fp(4096, bits);
  chem::Formula f = chem::Formula::parse("C6H6");
  const auto c = make_condition(f, fp, 256);
  REQUIRE(c.bits.size() == 256);
  CHECK(c.bits.front() == fp.bits().front());
  CHECK(c.bits.back() == fp.bits()[255]);
  CHECK(c.counts[0] == 6);
}

TEST_CASE("config presets and json") {
  const auto d = ModelConfig::desk();
  CHECK(d.n_layers == 4);
  CHECK(d.d_model == 128);
  CHECK(d.n_heads == 4);
  CHECK(d.d_ff == 512);
  CHECK(d.max_len == 64);
  CHECK(d.vocab_size == 256);
  const auto p = ModelConfig::full();
  CHECK(p.d_model == 768);
  CHECK(p.max_len == 256);
  CHECK(p.vocab_size == 1880);
  CHECK(ModelConfig::from_json(p.to_json()) == p);
  auto bad = d;
  bad.n_heads = 3;
  CHECK_THROWS(bad.validate());

  TrainConfig tc;
  tc.steps = 100;
  tc.warmup_steps = 10;
  CHECK(TrainConfig::from_json(tc.to_json()) == tc);
  tc.warmup_steps = 100;
  CHECK_THROWS(tc.validate());
}

TEST_CASE("learning-rate schedule") {
  TrainConfig tc;
  tc.steps = 1000;
  tc.warmup_steps = 100;
  CHECK(learning_rate(tc, 100) == tc.peak_lr);
  CHECK(learning_rate(tc, 50) == doctest::Approx(tc.peak_lr / 2));
  CHECK(learning_rate(tc, 1000) == doctest::Approx(tc.min_lr));
  CHECK(learning_rate(tc, 550) == doctest::Approx(tc.min_lr + (tc.peak_lr - tc.min_lr) / 2));
  for (int s = 100; s < 1000; ++s) CHECK(learning_rate(tc, s + 1) <= learning_rate(tc, s));
}

TEST_CASE("zero steps leave the model and shadow unchanged") {
  const auto toy = make_toy(40, 41);
  Denoiser<float> net(tiny_config(toy.vocab.size()), 2);
  std::vector<nn::Mat<float>> init;
  for (const auto& p : net.params()) init.push_back(p.value);
  TrainConfig tc;
  tc.steps = 0;
  tc.warmup_steps = 0;
  Trainer tr(net, tc);
  CHECK(tr.run(toy.data, NoiseSchedule{}, toy.vocab).empty());
  for (std::size_t i = 0; i < init.size(); ++i) {
    CHECK(net.params()[i].value == init[i]);
    CHECK(tr.ema()[i] == init[i]);
  }
}

TEST_CASE("EMA update is a coordinate-wise convex combination") {
  const auto toy = make_toy(40, 42);
  Denoiser<float> net(tiny_config(toy.vocab.size()), 2);
  TrainConfig tc;
  tc.steps = 10;
  tc.warmup_steps = 2;
  tc.ema_warmup = false;
  Trainer tr(net, tc);
  const auto prev = tr.ema();
  Rng rng(3);
  tr.train_step(ptrs(toy.data, 4), NoiseSchedule{}, toy.vocab, rng);
  double worst = 0.0;
  bool moved = false;
  for (std::size_t i = 0; i < prev.size(); ++i) {
    const nn::Mat<double> expect =
        0.9999 * prev[i].cast<double>() + 0.0001 * net.params()[i].value.cast<double>();
    worst = std::max(worst, (tr.ema()[i].cast<double>() - expect).cwiseAbs().maxCoeff());
    moved = moved || net.params()[i].value != prev[i];
  }
  CHECK(moved);
  CHECK(worst < 1e-7);
}

TEST_CASE("checkpoint round trip, corruption and resume") {
  const auto toy = make_toy(60, 51);
  const auto dir = std::filesystem::temp_directory_path() / "frigid_ckpt_test";
  std::filesystem::create_directories(dir);
  const auto path = dir / "a.ckpt";

  TrainConfig tc;
  tc.steps = 8;
  tc.warmup_steps = 2;
  tc.batch_size = 4;
  tc.seed = 17;

  Denoiser<float> full(tiny_config(toy.vocab.size()), 5);
  Trainer tf(full, tc);
  tf.run(toy.data, NoiseSchedule{}, toy.vocab);

  // Same run split in two halves around a save/load.
  Denoiser<float> half(tiny_config(toy.vocab.size()), 5);
  Trainer th(half, tc);
  th.run(toy.data, NoiseSchedule{}, toy.vocab, [](const TrainLogEntry& e) { return e.step < 4; });
  REQUIRE(th.step() == 4);
  save_checkpoint(make_checkpoint(th, toy.vocab, "{\"x\":1}"), path);
  const auto ck = load_checkpoint(path, toy.vocab.hash());
  CHECK(ck.step == 4);
  CHECK(ck.length_model_json == "{\"x\":1}");
  CHECK(tok::Vocabulary::from_json(ck.vocab_json) == toy.vocab);

  Denoiser<float> resumed(ck.model_config, 999);
  Trainer tr(resumed, ck.train_config);
  restore_trainer(ck, tr);
  tr.run(toy.data, NoiseSchedule{}, toy.vocab);
  for (std::size_t i = 0; i < full.params().size(); ++i) {
    CHECK(resumed.params()[i].value == full.params()[i].value);
    CHECK(tr.ema()[i] == tf.ema()[i]);
  }

  // Bit-identical logits after a round trip.
  save_checkpoint(make_checkpoint(tf, toy.vocab), path);
  const auto back = model_from_checkpoint(load_checkpoint(path), true);
  const auto direct = tf.ema_model();
  std::vector<int> seq = toy.data[0].x0.ids;
  CHECK(back->logits({seq}, {toy.data[0].cond}) == direct->logits({seq}, {toy.data[0].cond}));

  CHECK_THROWS_AS(load_checkpoint(path, toy.vocab.hash() ^ 1), CheckpointError);
  try {
    load_checkpoint(path, toy.vocab.hash() ^ 1);
  } catch (const CheckpointError& e) {
    CHECK(e.kind() == CheckpointError::Kind::ConfigMismatch);
  }

  const auto size = std::filesystem::file_size(path);
  std::filesystem::resize_file(path, size - 10);
  try {
    load_checkpoint(path);
    FAIL("truncated checkpoint loaded");
  } catch (const CheckpointError& e) {
    CHECK(e.kind() == CheckpointError::Kind::Corrupt);
  }
  {
    std::ofstream junk(path, std::ios::binary | std::ios::trunc);
    junk << "NOTACKPT";
  }
  CHECK_THROWS_AS(load_checkpoint(path), CheckpointError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("training reduces the loss on a small set") {
  const auto toy = make_toy(20, 61);
  Denoiser<float> net(tiny_config(toy.vocab.size()), 6);
  TrainConfig tc;
  tc.steps = 150;
  tc.warmup_steps = 10;
  tc.batch_size = 8;
  tc.peak_lr = 3e-3;
  Trainer tr(net, tc);
  const auto log = tr.run(toy.data, NoiseSchedule{}, toy.vocab);
  double first = 0.0, last = 0.0;
  for (int i = 0; i < 10; ++i) {
    first += log[static_cast<std::size_t>(i)].loss;
    last += log[log.size() - 1 - static_cast<std::size_t>(i)].loss;
  }
  CHECK(last < 0.7 * first);
}
