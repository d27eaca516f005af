#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "lreid/data/synth.hpp"
#include "lreid/eval/featstore.hpp"
#include "lreid/eval/metrics.hpp"
#include "lreid/eval/protocol.hpp"
#include "lreid/io.hpp"
#include "lreid/train/trainer.hpp"
#include "oracles.hpp"
#include "tempdir.hpp"

namespace {

using namespace lreid;
using eval::DatasetTag;
using eval::FeatureSet;
using testing_support::TempDir;

Tensor unit_rows(Tensor t) {
  const std::size_t d = t.dim(1);
  for (std::size_t r = 0; r < t.dim(0); ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += t[r * d + j] * t[r * d + j];
    for (std::size_t j = 0; j < d; ++j) t[r * d + j] /= std::sqrt(s);
  }
  return t;
}

FeatureSet random_set(std::size_t rows, std::size_t ids, int cams, Rng& rng, DatasetTag tag = {1, "gallery"}) {
  FeatureSet s;
  s.tag = std::move(tag);
  s.features = unit_rows(oracle::random_tensor({rows, 8}, rng));
  for (std::size_t r = 0; r < rows; ++r) {
    s.identities.push_back(static_cast<std::int64_t>(rng.below(ids)));
    s.cameras.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(cams))));
  }
  return s;
}

eval::RankedList ranked(const std::vector<std::uint8_t>& matches) {
  eval::RankedList rl;
  rl.matches = matches;
  return rl;
}

data::BenchmarkConfig tiny_benchmark(std::size_t tasks) {
  data::BenchmarkConfig c;
  c.tasks = tasks;
  c.ids_train = 8;
  c.ids_eval = 5;
  c.images_per_id = 6;
  c.camera_count = 3;
  return c;
}

train::TrainConfig tiny_train() {
  train::TrainConfig c;
  c.epochs_per_task = 1;
  c.steps_per_epoch = 4;
  c.p = 4;
  c.k = 2;
  c.replay_batch = 4;
  c.seed = 3;
  return c;
}

TEST(ExtractFeatures, RowsInOrderAndDeterministic) {
  const auto suite = data::gen_benchmark(tiny_benchmark(2), 1);
  Rng rng(1);
  const auto params = model::init_model(8, 5, model::Consolidation::multiply, rng);
  const auto a = eval::extract_features(params, suite[0].gallery, {1, "gallery"});
  const auto b = eval::extract_features(params, suite[0].gallery, {1, "gallery"});
  EXPECT_EQ(a.content_hash(), b.content_hash());
  ASSERT_EQ(a.rows(), suite[0].gallery.size());
  for (std::size_t r = 0; r < a.rows(); ++r) {
    EXPECT_EQ(a.identities[r], suite[0].gallery[r].identity);
    EXPECT_EQ(a.cameras[r], suite[0].gallery[r].camera);
  }
  EXPECT_EQ(a.extractor_version, 1);
}

TEST(ExtractFeatures, MatchesSingleImageForwardPass) {
  const auto suite = data::gen_benchmark(tiny_benchmark(2), 2);
  const auto res = train::train_sequence(suite, tiny_train(), {}, train::Ablation::proposed(), TempDir("ex").path());
  auto params = res.models.back();  // task 2: consolidated masks
  const auto fs = eval::extract_features(params, suite[1].query, {2, "query"});
  EXPECT_EQ(fs.extractor_version, 2);
  for (std::size_t r = 0; r < fs.rows(); ++r) {
    ad::Graph g;
    const auto m = model::bind(g, params);
    const auto out = model::forward(m, g.constant(model::stack_images({&suite[1].query[r].image})));
    const Tensor raw = out.global.raw.value();
    double norm = 0.0;
    for (double v : raw.data()) norm += v * v;
    norm = std::sqrt(norm);
    for (std::size_t j = 0; j < model::kFeatureDim; ++j) EXPECT_NEAR(fs.row(r)[j], raw[j] / norm, 1e-12);
  }
}

TEST(FeatureStoreTest, AppendLoadRoundTrip) {
  TempDir dir("fs");
  const eval::FeatureStore store(dir.path());
  Rng rng(2);
  auto set = random_set(12, 4, 2, rng, {3, "gallery"});
  set.extractor_version = 3;
  store.append(set);
  const auto back = store.load({3, "gallery"});
  EXPECT_EQ(back, set);
  EXPECT_EQ(back.content_hash(), set.content_hash());
}

TEST(FeatureStoreTest, DuplicateTagIsProtocolError) {
  TempDir dir("fs_dup");
  const eval::FeatureStore store(dir.path());
  Rng rng(3);
  const auto set = random_set(6, 3, 2, rng);
  store.append(set);
  const auto before = store.file_hash(set.tag);
  EXPECT_THROW(store.append(set), ProtocolError);
  EXPECT_EQ(store.file_hash(set.tag), before);
  EXPECT_THROW(store.load({2, "gallery"}), ProtocolError);
}

TEST(FeatureStoreTest, TamperedPayloadIsIntegrityError) {
  TempDir dir("fs_tamper");
  const eval::FeatureStore store(dir.path());
  Rng rng(4);
  const auto set = random_set(6, 3, 2, rng);
  store.append(set);
  auto bytes = io::read_file(store.payload_path(set.tag));
  bytes[17] ^= 0x01;
  io::write_file(store.payload_path(set.tag), bytes);
  EXPECT_THROW(store.load(set.tag), IntegrityError);
}

TEST(FeatureStoreTest, NonUnitRowsRejected) {
  TempDir dir("fs_norm");
  Rng rng(5);
  auto set = random_set(4, 2, 2, rng);
  set.features[0] *= 2.0;
  EXPECT_THROW(eval::FeatureStore(dir.path()).append(set), DegenerateInputError);
}

TEST(Rank, ExactCopyUnderOtherCameraRanksFirst) {
  Rng rng(6);
  auto gallery = random_set(10, 5, 3, rng);
  const std::size_t copy = 7;
  gallery.identities[copy] = 99;
  gallery.cameras[copy] = 1;
  const auto rl = eval::rank(gallery.row(copy), 99, 0, gallery);
  EXPECT_EQ(rl.order.front(), copy);
  EXPECT_EQ(rl.matches.front(), 1);
}

TEST(Rank, SameIdentitySameCameraExcluded) {
  Rng rng(7);
  auto gallery = random_set(10, 5, 3, rng);
  gallery.identities[2] = 42;
  gallery.cameras[2] = 0;
  gallery.identities[5] = 42;
  gallery.cameras[5] = 1;
  const auto rl = eval::rank(gallery.row(2), 42, 0, gallery);
  EXPECT_EQ(rl.order.size(), 9u);
  EXPECT_EQ(std::count(rl.order.begin(), rl.order.end(), 2u), 0);
  EXPECT_EQ(std::count(rl.order.begin(), rl.order.end(), 5u), 1);
}

TEST(Rank, TiesKeepAscendingRowOrder) {
  FeatureSet g;
  g.features = Tensor({4, 2}, {0, 1, 1, 0, 0, 1, 1, 0});
  g.identities = {1, 2, 3, 4};
  g.cameras = {0, 0, 0, 0};
  const double q[2] = {1.0, 0.0};
  const auto rl = eval::rank(q, 7, 1, g);
  EXPECT_EQ(rl.order, (std::vector<std::size_t>{1, 3, 0, 2}));
  EXPECT_TRUE(std::is_sorted(rl.similarity.rbegin(), rl.similarity.rend()));
}

TEST(Rank, OrderingMatchesBruteForceSort) {
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    Rng rng(seed);
    // Coarse features give exact ties.
    auto g = random_set(15, 4, 2, rng);
    for (auto& v : g.features.data()) v = std::round(v * 2.0) / 2.0;
    const auto q = unit_rows(oracle::random_tensor({1, 8}, rng));
    const auto rl = eval::rank(q.ptr(), 1, 0, g);
    std::vector<std::pair<double, std::size_t>> ref;
    for (std::size_t r = 0; r < g.rows(); ++r) {
      if (g.identities[r] == 1 && g.cameras[r] == 0) continue;
      double s = 0.0;
      for (std::size_t j = 0; j < 8; ++j) s += q[j] * g.row(r)[j];
      ref.emplace_back(-s, r);
    }
    std::sort(ref.begin(), ref.end());
    ASSERT_EQ(rl.order.size(), ref.size());
    for (std::size_t i = 0; i < ref.size(); ++i) ASSERT_EQ(rl.order[i], ref[i].second) << "seed " << seed;
  }
}

TEST(Rank, EmptyGalleryRejected) {
  FeatureSet g;
  const double q[1] = {1.0};
  EXPECT_THROW(eval::rank(q, 0, 0, g), DegenerateInputError);
}

TEST(AveragePrecision, HandExamples) {
  EXPECT_EQ(*eval::average_precision(ranked({1, 0, 0})), 1.0);
  EXPECT_NEAR(*eval::average_precision(ranked({1, 0, 1, 0})), (1.0 + 2.0 / 3.0) / 2.0, 1e-15);
  EXPECT_FALSE(eval::average_precision(ranked({0, 0})).has_value());
}

TEST(AveragePrecision, EqualsAreaUnderPrecisionRecall) {
  Rng rng(8);
  for (int i = 0; i < 200; ++i) {
    const std::size_t n = 1 + rng.below(30);
    std::vector<std::uint8_t> m(n);
    for (auto& v : m) v = rng.uniform() < 0.3;
    m[rng.below(n)] = 1;
    const double total = std::accumulate(m.begin(), m.end(), 0.0);
    long double area = 0.0, prev_recall = 0.0, hits = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      hits += m[k];
      const long double recall = hits / total;
      area += (hits / (k + 1)) * (recall - prev_recall);
      prev_recall = recall;
    }
    EXPECT_NEAR(*eval::average_precision(ranked(m)), static_cast<double>(area), 1e-12);
  }
}

TEST(Retrieval, MatchesBruteForceOracle) {
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    Rng rng(1000 + seed);
    const auto q = random_set(1 + rng.below(6), 4, 3, rng, {1, "query"});
    const auto g = random_set(5 + rng.below(20), 4, 3, rng);
    const auto got = eval::evaluate_retrieval(q, g);
    const auto ref = oracle::retrieval(q.features, q.identities, q.cameras, g.features, g.identities, g.cameras);
    ASSERT_EQ(got.evaluated, ref.evaluated) << "seed " << seed;
    EXPECT_EQ(got.evaluated + got.skipped, q.rows());
    EXPECT_NEAR(got.mAP, ref.mAP, 1e-12) << "seed " << seed;
    EXPECT_NEAR(got.rank1, ref.rank1, 1e-12) << "seed " << seed;
  }
}

TEST(Retrieval, InvariantUnderGalleryPermutation) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(seed);
    const auto q = random_set(5, 4, 3, rng, {1, "query"});
    const auto g = random_set(20, 4, 3, rng);
    std::vector<std::size_t> perm(g.rows());
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm);
    FeatureSet p = g;
    for (std::size_t r = 0; r < g.rows(); ++r) {
      std::copy(g.row(perm[r]), g.row(perm[r]) + g.dim(), p.features.ptr() + r * g.dim());
      p.identities[r] = g.identities[perm[r]];
      p.cameras[r] = g.cameras[perm[r]];
    }
    const auto a = eval::evaluate_retrieval(q, g), b = eval::evaluate_retrieval(q, p);
    EXPECT_EQ(a.mAP, b.mAP);
    EXPECT_EQ(a.rank1, b.rank1);
  }
}

TEST(Retrieval, PerfectSeparationGivesOneAndRankOneIsBinaryMean) {
  FeatureSet g;
  g.features = Tensor({4, 2}, {1, 0, 1, 0, 0, 1, 0, 1});
  g.identities = {1, 1, 2, 2};
  g.cameras = {1, 2, 1, 2};
  FeatureSet q;
  q.features = Tensor({2, 2}, {1, 0, 0, 1});
  q.identities = {1, 2};
  q.cameras = {0, 0};
  auto s = eval::evaluate_retrieval(q, g);
  EXPECT_EQ(s.mAP, 1.0);
  EXPECT_EQ(s.rank1, 1.0);
  q.features = Tensor({2, 2}, {1, 0, 1, 0});  // second query now ranks identity 1 first
  s = eval::evaluate_retrieval(q, g);
  EXPECT_LT(s.mAP, 1.0);
  EXPECT_EQ(s.rank1, 0.5);
}

TEST(Retrieval, QueriesWithoutValidMatchAreCountedNotScored) {
  FeatureSet g;
  g.features = Tensor({2, 2}, {1, 0, 0, 1});
  g.identities = {1, 2};
  g.cameras = {0, 0};
  FeatureSet q;
  q.features = Tensor({2, 2}, {1, 0, 0, 1});
  q.identities = {1, 2};
  q.cameras = {0, 1};
  const auto s = eval::evaluate_retrieval(q, g);
  EXPECT_EQ(s.skipped, 1u);
  EXPECT_EQ(s.evaluated, 1u);
  EXPECT_EQ(s.mAP, 1.0);
}

TEST(MetricsTableTest, AverageAndCsvShape) {
  eval::MetricsTable t;
  t.rows = {{"task_1", 0.5, 0.25}, {"task_2", 1.0, 0.75}};
  const auto avg = t.average();
  EXPECT_EQ(avg.mAP, 0.75);
  EXPECT_EQ(avg.rank1, 0.5);
  EXPECT_EQ(t.to_csv(), "dataset,mAP,rank1\ntask_1,0.500000,0.250000\ntask_2,1.000000,0.750000\nAverage,0.750000,0.500000\n");
}

class ProtocolTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir = new TempDir("protocol");
    suite = new std::vector<data::TaskDataset>(data::gen_benchmark(tiny_benchmark(2), 4));
    result = new train::SequenceResult(
        train::train_sequence(*suite, tiny_train(), {}, train::Ablation::proposed(), dir->path()));
  }
  static void TearDownTestSuite() {
    delete result;
    delete suite;
    delete dir;
  }
  static eval::FeatureStore store() { return eval::FeatureStore((*dir) / "features"); }

  static TempDir* dir;
  static std::vector<data::TaskDataset>* suite;
  static train::SequenceResult* result;
};
TempDir* ProtocolTest::dir = nullptr;
std::vector<data::TaskDataset>* ProtocolTest::suite = nullptr;
train::SequenceResult* ProtocolTest::result = nullptr;

TEST_F(ProtocolTest, PerDatasetUsesStoredGalleries) {
  const auto& final_model = result->models.back();
  const auto table = eval::evaluate_per_dataset(final_model, *suite, store());
  ASSERT_EQ(table.rows.size(), 2u);
  EXPECT_EQ(store().load({1, "gallery"}).extractor_version, 1);
  EXPECT_EQ(store().load({2, "gallery"}).extractor_version, 2);
  for (std::size_t t = 0; t < 2; ++t) {
    const auto q = eval::extract_features(final_model, (*suite)[t].query, {int(t) + 1, "query"});
    const auto g = store().load({int(t) + 1, "gallery"});
    const auto ref = oracle::retrieval(q.features, q.identities, q.cameras, g.features, g.identities, g.cameras);
    EXPECT_NEAR(table.rows[t].mAP, ref.mAP, 1e-12);
    EXPECT_NEAR(table.rows[t].rank1, ref.rank1, 1e-12);
    EXPECT_GE(table.rows[t].mAP, 0.0);
    EXPECT_LE(table.rows[t].mAP, 1.0);
  }
  EXPECT_EQ(eval::evaluate_per_dataset(final_model, *suite, store()).to_csv(), table.to_csv());
}

TEST_F(ProtocolTest, BackfilledControlIsSeparatePath) {
  const auto& final_model = result->models.back();
  const auto stored = eval::evaluate_per_dataset(final_model, *suite, store());
  const auto backfilled = eval::evaluate_backfilled(final_model, *suite);
  // The last gallery was embedded by the final model in both modes.
  EXPECT_EQ(stored.rows[1].mAP, backfilled.rows[1].mAP);
  const auto g1 = eval::extract_features(final_model, (*suite)[0].gallery, {1, "gallery"});
  EXPECT_NE(g1.content_hash(), store().load({1, "gallery"}).content_hash());
}

TEST_F(ProtocolTest, UnifiedMatchesOracleOverConcatenation) {
  const auto& final_model = result->models.back();
  const auto unified = eval::evaluate_unified(final_model, *suite, store());
  std::vector<FeatureSet> qs, gs;
  for (int t = 1; t <= 2; ++t) {
    qs.push_back(eval::extract_features(final_model, (*suite)[t - 1].query, {t, "query"}));
    gs.push_back(store().load({t, "gallery"}));
  }
  const auto q = eval::concat_sets(qs, {0, "query"}), g = eval::concat_sets(gs, {0, "gallery"});
  const auto ref = oracle::retrieval(q.features, q.identities, q.cameras, g.features, g.identities, g.cameras);
  EXPECT_NEAR(unified.mAP, ref.mAP, 1e-12);
  EXPECT_NEAR(unified.rank1, ref.rank1, 1e-12);
  const auto per = eval::evaluate_per_dataset(final_model, *suite, store());
  EXPECT_LE(unified.mAP, std::max(per.rows[0].mAP, per.rows[1].mAP));
}

TEST_F(ProtocolTest, CompatibilityMatrixMatchesManualPipeline) {
  const auto mat = eval::compatibility_matrix(result->models, *suite, store());
  ASSERT_EQ(mat.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 2; ++j) {
      const auto q = eval::extract_features(result->models[i], (*suite)[j].query, {int(j) + 1, "query"});
      const auto g = eval::extract_features(result->models[j], (*suite)[j].gallery, {int(j) + 1, "gallery"});
      EXPECT_NEAR(mat[i][j], eval::evaluate_retrieval(q, g).mAP, 1e-12) << i << "," << j;
    }
  const auto per = eval::evaluate_per_dataset(result->models.back(), *suite, store());
  for (std::size_t j = 0; j < 2; ++j) EXPECT_NEAR(mat[1][j], per.rows[j].mAP, 1e-12);
}

TEST_F(ProtocolTest, GalleryBytesUnchangedSinceWritten) {
  for (int t = 1; t <= 2; ++t) EXPECT_EQ(store().file_hash({t, "gallery"}), result->gallery_hashes[t - 1]);
}

TEST(ProtocolSingleTask, PerDatasetEqualsSelfConsistentAndUnified) {
  TempDir dir("single");
  const auto suite = data::gen_benchmark(tiny_benchmark(2), 5);
  const std::vector<data::TaskDataset> one{suite[0]};
  Rng rng(9);
  const auto params = model::init_model(8, 5, model::Consolidation::multiply, rng);
  const eval::FeatureStore store(dir.path());
  store.append(eval::extract_features(params, one[0].gallery, {1, "gallery"}));
  const auto per = eval::evaluate_per_dataset(params, one, store);
  const auto self = eval::evaluate_backfilled(params, one);
  EXPECT_EQ(per.to_csv(), self.to_csv());
  const auto unified = eval::evaluate_unified(params, one, store);
  EXPECT_EQ(unified.mAP, per.rows[0].mAP);
  EXPECT_EQ(unified.rank1, per.rows[0].rank1);
}

TEST(ProtocolSingleTask, MissingGalleryIsProtocolError) {
  TempDir dir("missing_gallery");
  const auto suite = data::gen_benchmark(tiny_benchmark(2), 6);
  Rng rng(10);
  const auto params = model::init_model(8, 5, model::Consolidation::multiply, rng);
  EXPECT_THROW(eval::evaluate_per_dataset(params, suite, eval::FeatureStore(dir.path())), ProtocolError);
}

}  // namespace
