#include <gtest/gtest.h>

#include <cmath>

#include "mdprune/model.hpp"

using namespace mdprune;

namespace {

ToyModelConfig small_config() {
    ToyModelConfig c;
    c.depth = 2;
    c.width = 8;
    c.mlp_width = 16;
    c.context = 8;
    return c;
}

CalibrationSet three_sequences() {
    return make_sequences({"the cat sat on the mat", "a dog ran to the log", "we met at the net"}, 8);
}

}  // namespace

TEST(ToyModel, DeterministicForSeed) {
    const auto a = ToyModel::build(small_config());
    const auto b = ToyModel::build(small_config());
    for (std::size_t i = 0; i < a.layers().size(); ++i) EXPECT_EQ(a.layers()[i].w0(), b.layers()[i].w0());
    auto c = small_config();
    c.seed = 2;
    EXPECT_NE(ToyModel::build(c).layers()[0].w0(), a.layers()[0].w0());
}

TEST(ToyModel, LayerLayout) {
    ToyModelConfig c;
    c.depth = 2;
    c.width = 16;
    c.vocab = 27;
    const auto m = ToyModel::build(c);
    ASSERT_EQ(m.layers().size(), 12u);
    std::size_t attn = 0, mlp = 0;
    for (const auto& l : m.layers()) (is_attention(l.role()) ? attn : mlp)++;
    EXPECT_EQ(attn, 8u);
    EXPECT_EQ(mlp, 4u);
    EXPECT_EQ(m.layers()[4].name(), "block0.up");
    EXPECT_EQ(m.layers()[4].w0().shape(), (Shape{64, 16}));
    EXPECT_EQ(m.layers()[5].w0().shape(), (Shape{16, 64}));
}

TEST(ToyModel, SearchStateInitialisation) {
    const auto m = ToyModel::build(small_config());
    for (const auto& l : m.layers()) {
        EXPECT_EQ(l.weight, l.w0());
        EXPECT_EQ(l.gamma, Tensor(l.w0().shape()));
        EXPECT_EQ(l.dual, Tensor(l.w0().shape()));
    }
}

TEST(ToyModel, RejectsZeroSizes) {
    auto c = small_config();
    c.width = 0;
    EXPECT_THROW(ToyModel::build(c), std::invalid_argument);
    c = small_config();
    c.depth = 0;
    EXPECT_THROW(ToyModel::build(c), std::invalid_argument);
}

TEST(ToyModel, ArchiveRoundTrip) {
    const auto m = ToyModel::build(small_config());
    const auto back = ToyModel::from_archive(TensorArchive::parse(m.to_archive().serialize()));
    EXPECT_EQ(back.embedding(), m.embedding());
    for (std::size_t i = 0; i < m.layers().size(); ++i) EXPECT_EQ(back.layers()[i].w0(), m.layers()[i].w0());
    EXPECT_EQ(m.to_archive().metadata()["layers"].size(), m.layers().size());
}

TEST(Stats, DirectNorms) {
    const auto st = column_norms(Tensor::matrix({{3, 0}, {0, 4}}));
    EXPECT_EQ(st.col_norms, (std::vector<double>{3, 4}));
    EXPECT_EQ(column_norms(Tensor({5, 3})).col_norms, std::vector<double>(3, 0.0));
}

TEST(Stats, BatchesEqualConcatenation) {
    ActivationAccumulator split(2), whole(2);
    split.add_rows(Tensor::matrix({{1, 2}}));
    split.add_rows(Tensor::matrix({{3, 4}, {5, 6}}));
    whole.add_rows(Tensor::matrix({{1, 2}, {3, 4}, {5, 6}}));
    EXPECT_EQ(split.finish().col_norms, whole.finish().col_norms);
}

TEST(Stats, CollectedOverCalibrationSet) {
    const auto m = ToyModel::build(small_config());
    const auto calib = three_sequences();
    const auto st = collect_activation_stats(m, calib);
    ASSERT_EQ(st.size(), m.layers().size());
    for (std::size_t i = 0; i < st.size(); ++i) {
        EXPECT_EQ(st[i].col_norms.size(), m.layers()[i].in_features());
        EXPECT_EQ(st[i].sample_count, calib.row_count());
    }
    // reversing the calibration order gives the same norms up to rounding
    CalibrationSet rev = calib;
    std::reverse(rev.sequences.begin(), rev.sequences.end());
    const auto st2 = collect_activation_stats(m, rev);
    for (std::size_t i = 0; i < st.size(); ++i)
        for (std::size_t j = 0; j < st[i].col_norms.size(); ++j)
            EXPECT_NEAR(st[i].col_norms[j], st2[i].col_norms[j], 1e-12 * (1 + st[i].col_norms[j]));
    EXPECT_THROW(collect_activation_stats(m, CalibrationSet{}), std::invalid_argument);
}

TEST(TaskLoss, UniformLogitsGiveLogVocab) {
    auto w = random_weights(small_config());
    w.unembed = Tensor(w.unembed.shape());
    const auto m = ToyModel::from_weights(small_config(), w);
    const auto lin = m.frozen_weights();
    EXPECT_NEAR(task_loss(m, lin, three_sequences()), std::log(27.0), 1e-12);
}

TEST(TaskLoss, DeterministicAndChunkInvariant) {
    const auto m = ToyModel::build(small_config());
    const auto lin = m.frozen_weights();
    const auto calib = three_sequences();
    const auto a = task_loss_and_grad(m, lin, calib);
    const auto b = task_loss_and_grad(m, lin, calib);
    EXPECT_EQ(a.loss, b.loss);
    EXPECT_EQ(a.grads[3], b.grads[3]);
    const auto c = task_loss_and_grad(m, lin, calib, true, 1);
    EXPECT_NEAR(a.loss, c.loss, 1e-12);
    for (std::size_t k = 0; k < a.grads[0].size(); ++k) EXPECT_NEAR(a.grads[0][k], c.grads[0][k], 1e-12);
}

TEST(TaskLoss, RejectsShortSequences) {
    const auto m = ToyModel::build(small_config());
    CalibrationSet bad{{{1}}, 8, kAlphabetSize};
    EXPECT_THROW(task_loss(m, m.frozen_weights(), bad), std::invalid_argument);
}

TEST(TaskLoss, DecreasesUnderGradientDescent) {
    const auto m = ToyModel::build(small_config());
    const auto calib = three_sequences();
    auto lin = m.frozen_weights();
    std::vector<double> losses;
    for (int step = 0; step < 100; ++step) {
        const auto lg = task_loss_and_grad(m, lin, calib);
        losses.push_back(lg.loss);
        for (std::size_t i = 0; i < lin.size(); ++i) lin[i] = axpy(lin[i], -0.02, lg.grads[i]);
    }
    EXPECT_LT(losses.back(), 0.8 * losses.front());
    int rises = 0;
    for (std::size_t i = 1; i < losses.size(); ++i) rises += losses[i] > losses[i - 1] + 1e-9;
    EXPECT_LE(rises, 5);
}

TEST(ApplyMask, Examples) {
    DenseWeights w = random_weights(small_config());
    auto m = ToyModel::from_weights(small_config(), w);
    const PrunableLayer& l = m.layers()[0];
    EXPECT_EQ(apply_mask(l, Tensor(l.w0().shape(), 1.0)), l.w0());
    EXPECT_EQ(apply_mask(l, Tensor(l.w0().shape(), 0.0)), Tensor(l.w0().shape()));

    PrunableLayer tiny("t", LayerRole::Query, 0, Tensor::matrix({{5, 6}, {7, 8}}));
    tiny.weight = Tensor({2, 2}, 100.0);
    EXPECT_EQ(apply_mask(tiny, Tensor::matrix({{1, 0}, {0, 1}})), Tensor::matrix({{5, 0}, {0, 8}}));
    EXPECT_EQ(tiny.w0(), Tensor::matrix({{5, 6}, {7, 8}}));
    EXPECT_THROW(apply_mask(tiny, Tensor({2, 3})), ShapeError);
    EXPECT_THROW(apply_mask(tiny, Tensor({2, 2}, 0.5)), std::invalid_argument);
}

TEST(Pretrain, ReducesLoss) {
    const auto c = small_config();
    auto w = random_weights(c);
    const auto train = make_sequences(generate_markov_corpus({7, 20, 80, 3}), c.context);
    PretrainConfig pc;
    pc.steps = 60;
    pc.batch_sequences = 4;
    const auto losses = pretrain(c, w, train, pc);
    ASSERT_EQ(losses.size(), 60u);
    double head = 0, tail = 0;
    for (int i = 0; i < 10; ++i) {
        head += losses[i];
        tail += losses[50 + i];
    }
    EXPECT_LT(tail, head);
}
