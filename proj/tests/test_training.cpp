#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "dms/corpus.hpp"
#include "dms/model.hpp"
#include "dms/training.hpp"

using namespace dms;
using model::ModelConfig;
using model::Weights;
using training::TrainConfig;

namespace {

corpus::TaskConfig tiny_task() {
    corpus::TaskConfig c;
    c.modulus = 7;
    c.n_fact_keys = 10;
    c.contamination_fraction = 0.15;
    c.answer_len = 3;
    c.rule_holdout_fraction = 0.15;
    c.vocab_size = 24;
    c.seed = 11;
    return c;
}

ModelConfig tiny_model(int vocab) {
    ModelConfig c;
    c.n_layers = 2;
    c.d_model = 32;
    c.n_heads = 2;
    c.vocab_size = vocab;
    c.context_len = 12;
    c.seed = 5;
    return c;
}

}  // namespace

TEST_CASE("analytic gradients match central differences") {
    ModelConfig mc;
    mc.n_layers = 2;
    mc.d_model = 16;
    mc.n_heads = 2;
    mc.vocab_size = 11;
    mc.context_len = 8;
    mc.seed = 21;
    Weights w = model::init_weights(mc);
    // Larger weights make gradient signals well above finite-difference noise.
    w.visit_tensors([](const std::string&, std::vector<float>& t, bool is_matrix) {
        if (is_matrix) {
            for (float& v : t) {
                v *= 8.0f;
            }
        }
    });

    const std::vector<int> prompt{1, 4, 7, 2};
    const std::vector<int> answer{3, 9, 0};

    Weights grads = training::make_grad_buffer(w);
    training::answer_loss_and_grad(w, prompt, answer, grads);

    std::vector<std::vector<float>*> wt, gt;
    std::vector<std::string> names;
    w.visit_tensors([&](const std::string& n, std::vector<float>& t, bool) {
        wt.push_back(&t);
        names.push_back(n);
    });
    grads.visit_tensors([&](const std::string&, std::vector<float>& t, bool) { gt.push_back(&t); });

    // Spot-check a deterministic selection of coordinates across all tensors.
    const float eps = 2e-3f;
    int checked = 0;
    double worst_rel = 0.0;
    for (size_t ti = 0; ti < wt.size(); ++ti) {
        std::vector<float>& tensor = *wt[ti];
        const size_t stride = std::max<size_t>(1, tensor.size() / 3);
        for (size_t j = tensor.size() / 7; j < tensor.size(); j += stride) {
            const float saved = tensor[j];
            tensor[j] = saved + eps;
            const double lp = training::answer_loss(w, prompt, answer).first;
            tensor[j] = saved - eps;
            const double lm = training::answer_loss(w, prompt, answer).first;
            tensor[j] = saved;
            const double fd = (lp - lm) / (2.0 * eps);
            const double an = (*gt[ti])[j];
            const double denom = std::max({std::abs(fd), std::abs(an), 1e-2});
            const double rel = std::abs(fd - an) / denom;
            worst_rel = std::max(worst_rel, rel);
            INFO(names[ti], "[", j, "] analytic=", an, " fd=", fd);
            CHECK(rel < 0.05);
            ++checked;
        }
    }
    CHECK(checked > 40);
}

TEST_CASE("loss at step 0 is close to ln(vocab) per answer token") {
    const corpus::Corpus c = corpus::generate_corpus(tiny_task());
    const Weights w = model::init_weights(tiny_model(c.config.vocab_size));
    const corpus::Item& item = *c.trainable_items().front();
    const auto [loss, n] = training::answer_loss(w, item.prompt, item.answer);
    const double per_token = loss / n;
    const double uniform = std::log(static_cast<double>(c.config.vocab_size));
    CHECK(per_token == doctest::Approx(uniform).epsilon(0.10));
}

TEST_CASE("learning_rate zero leaves the weights untouched") {
    const corpus::Corpus c = corpus::generate_corpus(tiny_task());
    const Weights w0 = model::init_weights(tiny_model(c.config.vocab_size));
    TrainConfig tc;
    tc.steps = 3;
    tc.batch_size = 4;
    tc.learning_rate = 0.0;
    tc.weight_decay = 0.1;
    tc.checkpoint_every = 3;
    tc.seed = 1;
    const training::TrainResult r = training::train(w0, c, tc, "");
    CHECK(r.weights.tok_emb == w0.tok_emb);
    CHECK(r.weights.unembed == w0.unembed);
    CHECK(r.weights.layers[1].w1 == w0.layers[1].w1);
}

TEST_CASE("adamw decays matrices but not biases or norm gains") {
    ModelConfig mc = tiny_model(24);
    Weights w = model::init_weights(mc);
    // Force nonzero biases/gains so a decay bug would be visible.
    for (auto& lw : w.layers) {
        std::fill(lw.bq.begin(), lw.bq.end(), 0.5f);
    }
    Weights g = training::make_grad_buffer(w);  // all-zero gradients

    const float wq_before = w.layers[0].wq[0];
    training::AdamW opt;
    opt.step(w, g, /*lr=*/0.1, /*weight_decay=*/0.5);

    // zero grad => pure decay on matrices only
    CHECK(w.layers[0].wq[0] == doctest::Approx(wq_before * (1.0f - 0.1f * 0.5f)));
    for (float b : w.layers[0].bq) {
        CHECK(b == 0.5f);
    }
    for (float gain : w.layers[0].ln1_gain) {
        CHECK(gain == 1.0f);
    }
}

TEST_CASE("training is deterministic and the loss decreases") {
    const corpus::Corpus c = corpus::generate_corpus(tiny_task());
    const Weights w0 = model::init_weights(tiny_model(c.config.vocab_size));
    TrainConfig tc;
    tc.steps = 40;
    tc.batch_size = 8;
    tc.checkpoint_every = 20;
    tc.seed = 33;
    tc.eval_train_items = 32;
    tc.eval_heldout_items = 7;

    const training::TrainResult a = training::train(w0, c, tc, "");
    const training::TrainResult b = training::train(w0, c, tc, "");
    CHECK(a.weights.tok_emb == b.weights.tok_emb);
    CHECK(a.weights.unembed == b.weights.unembed);
    REQUIRE(a.trace.rows.size() == b.trace.rows.size());
    for (size_t i = 0; i < a.trace.rows.size(); ++i) {
        CHECK(a.trace.rows[i].loss == b.trace.rows[i].loss);
        CHECK(a.trace.rows[i].train_acc == b.trace.rows[i].train_acc);
    }
    CHECK(a.trace.rows.back().loss < a.trace.rows.front().loss);
}

TEST_CASE("checkpoints round-trip through eval_accuracy bit-exactly") {
    const corpus::Corpus c = corpus::generate_corpus(tiny_task());
    const Weights w0 = model::init_weights(tiny_model(c.config.vocab_size));
    TrainConfig tc;
    tc.steps = 20;
    tc.batch_size = 8;
    tc.checkpoint_every = 10;
    tc.seed = 9;
    const auto dir = std::filesystem::temp_directory_path() / "dms_ckpt_dir_test";
    std::filesystem::remove_all(dir);
    const training::TrainResult r = training::train(w0, c, tc, dir);
    REQUIRE(r.checkpoint_steps.size() == 2);

    const auto heldout = c.split_items(corpus::Split::HELDOUT_RULE);
    const double live = training::eval_accuracy(r.weights, heldout);
    const model::Checkpoint loaded = model::load_checkpoint(dir / "ckpt_000020.dms");
    CHECK(loaded.step == 20);
    CHECK(training::eval_accuracy(loaded.weights, heldout) == live);
    std::filesystem::remove_all(dir);
}

TEST_CASE("eval_accuracy contract") {
    const corpus::Corpus c = corpus::generate_corpus(tiny_task());
    const Weights w = model::init_weights(tiny_model(c.config.vocab_size));

    const auto heldout = c.split_items(corpus::Split::HELDOUT_RULE);
    const double x = training::eval_accuracy(w, heldout);
    const double y = training::eval_accuracy(w, heldout);
    CHECK(x == y);
    CHECK(x >= 0.0);
    CHECK(x <= 1.0);
    CHECK_THROWS_AS(training::eval_accuracy(w, std::vector<const corpus::Item*>{}),
                    std::invalid_argument);
}

TEST_CASE("trace json lines round trip and amateur scan") {
    training::TrainTrace trace;
    trace.rows.push_back({0, 3.0, 0.01, 0.0, 0.0});
    trace.rows.push_back({100, 1.0, 0.92, 0.3, 0.5});
    trace.rows.push_back({200, 0.5, 0.99, 0.7, 0.9});
    const auto path = std::filesystem::temp_directory_path() / "dms_trace_test.jsonl";
    trace.save_jsonl(path);
    const training::TrainTrace loaded = training::TrainTrace::load_jsonl(path);
    REQUIRE(loaded.rows.size() == 3);
    CHECK(loaded.rows[1].train_acc == doctest::Approx(0.92));

    CHECK(trace.amateur_step().value() == 100);
    CHECK(trace.first_step_reaching(0.99).value() == 200);
    CHECK(trace.first_heldout_step_reaching(0.65).value() == 200);
    CHECK(!trace.first_heldout_step_reaching(0.9).has_value());
    std::filesystem::remove(path);
}
