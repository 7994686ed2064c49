#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>

#include "fedtsa/error.hpp"
#include "fedtsa/data.hpp"
#include "fedtsa/netpbm.hpp"

using namespace fedtsa;
namespace fs = std::filesystem;

namespace {

LabeledDataset blobs(std::size_t classes = 4, std::size_t per_class = 200, std::uint64_t seed = 1) {
    BlobsOptions o;
    o.classes = classes;
    o.per_class = per_class;
    o.shape = {6};
    o.seed = seed;
    return make_blobs(o);
}

std::vector<std::size_t> class_counts(const LabeledDataset& ds, const std::vector<std::size_t>& idx) {
    std::vector<std::size_t> counts(ds.class_count, 0);
    for (std::size_t i : idx) ++counts[ds.labels[i]];
    return counts;
}

void expect_partition_laws(const Partition& p, const std::vector<std::size_t>& expected_union) {
    std::vector<std::size_t> all;
    for (const auto& c : p.clients) {
        EXPECT_FALSE(c.empty());
        all.insert(all.end(), c.begin(), c.end());
    }
    std::sort(all.begin(), all.end());
    EXPECT_TRUE(std::adjacent_find(all.begin(), all.end()) == all.end()) << "clients overlap";
    EXPECT_EQ(all, expected_union);
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

Tensor gray(std::size_t h, std::size_t w, double v) { return Tensor({1, h, w}, v); }

} // namespace

TEST(Blobs, SizeBalanceAndDeterminism) {
    const auto ds = blobs();
    EXPECT_EQ(ds.size(), 800u);
    EXPECT_EQ(class_counts(ds, [&] {
                  std::vector<std::size_t> v(ds.size());
                  std::iota(v.begin(), v.end(), 0);
                  return v;
              }()),
              (std::vector<std::size_t>{200, 200, 200, 200}));
    const auto again = blobs();
    EXPECT_EQ(again.features, ds.features);
    EXPECT_EQ(again.labels, ds.labels);
    EXPECT_NE(blobs(4, 200, 2).features, ds.features);
    EXPECT_NO_THROW(validate_dataset(ds));
}

TEST(Blobs, BuiltinNameSelectsGenerator) {
    BlobsOptions o;
    o.classes = 3;
    o.per_class = 5;
    const auto ds = load_dataset("blobs", o);
    EXPECT_EQ(ds.size(), 15u);
    EXPECT_EQ(ds.class_count, 3u);
}

TEST(Netpbm, RoundTripGrayAndColor) {
    TempDir dir("fedtsa_netpbm_test");
    Tensor g({1, 2, 3}, std::vector<double>{0.0, 1.0, 0.2, 0.4, 0.6, 0.8});
    write_netpbm(dir.path / "g.pgm", g);
    const auto g2 = read_netpbm(dir.path / "g.pgm");
    ASSERT_EQ(g2.shape(), g.shape());
    for (std::size_t i = 0; i < g.size(); ++i) EXPECT_NEAR(g2[i], g[i], 0.5 / 255 + 1e-12);

    Tensor c({3, 1, 2}, std::vector<double>{1.0, 0.0, 0.0, 1.0, 0.5, 0.5});
    write_netpbm(dir.path / "c.ppm", c);
    EXPECT_EQ(read_netpbm(dir.path / "c.ppm").shape(), c.shape());
}

TEST(Netpbm, PlainFormatsAndErrors) {
    TempDir dir("fedtsa_netpbm_plain");
    std::ofstream(dir.path / "a.pbm") << "P1\n# comment\n2 2\n1 0\n0 1\n";
    const auto bits = read_netpbm(dir.path / "a.pbm");
    EXPECT_EQ(bits.values()[0], 0.0);
    EXPECT_EQ(bits.values()[1], 1.0);
    std::ofstream(dir.path / "b.pgm") << "P2\n2 1\n4\n0 4\n";
    const auto g = read_netpbm(dir.path / "b.pgm");
    EXPECT_EQ(g.values()[1], 1.0);
    std::ofstream(dir.path / "bad.pgm") << "P2\n2 2\n4\n0 4\n";
    EXPECT_THROW(read_netpbm(dir.path / "bad.pgm"), IngestionError);
    EXPECT_THROW(read_netpbm(dir.path / "missing.pgm"), IngestionError);
}

TEST(ImageDirectory, CountsClassesAndExamples) {
    TempDir dir("fedtsa_imgdir_test");
    for (const char* cls : {"cat", "dog"}) {
        fs::create_directories(dir.path / cls);
        for (int i = 0; i < 3; ++i) write_netpbm(dir.path / cls / (std::to_string(i) + ".pgm"), gray(4, 4, i / 3.0));
    }
    const auto ds = load_dataset(dir.path.string());
    EXPECT_EQ(ds.size(), 6u);
    EXPECT_EQ(ds.class_count, 2u);
    EXPECT_EQ(ds.class_names, (std::vector<std::string>{"cat", "dog"}));
    EXPECT_EQ(ds.feature_shape, (Shape{1, 4, 4}));
}

TEST(ImageDirectory, InconsistentShapesAreIngestionErrors) {
    TempDir dir("fedtsa_imgdir_bad");
    fs::create_directories(dir.path / "a");
    fs::create_directories(dir.path / "b");
    write_netpbm(dir.path / "a" / "0.pgm", gray(4, 4, 0.1));
    write_netpbm(dir.path / "b" / "0.pgm", gray(5, 4, 0.1));
    EXPECT_THROW(load_dataset(dir.path.string()), IngestionError);
    EXPECT_THROW(load_dataset((dir.path / "nope").string()), IngestionError);
}

TEST(PartitionIid, EvenStratifiedSplit) {
    const auto ds = blobs();
    const auto p = partition_iid(ds, 8, 3);
    ASSERT_EQ(p.client_count(), 8u);
    for (const auto& c : p.clients) {
        EXPECT_EQ(c.size(), 100u);
        EXPECT_EQ(class_counts(ds, c), (std::vector<std::size_t>{25, 25, 25, 25}));
    }
}

TEST(PartitionIid, SingleClientHoldsEverything) {
    const auto ds = blobs();
    EXPECT_EQ(partition_iid(ds, 1, 3).clients[0].size(), 800u);
}

TEST(PartitionIid, SizesDifferByAtMostOne) {
    const auto ds = blobs(3, 17);
    const auto p = partition_iid(ds, 7, 5);
    std::size_t lo = ds.size(), hi = 0;
    for (const auto& c : p.clients) {
        lo = std::min(lo, c.size());
        hi = std::max(hi, c.size());
    }
    EXPECT_LE(hi - lo, 1u);
    EXPECT_THROW(partition_iid(ds, ds.size() + 1, 5), ValidationError);
}

TEST(PartitionDirichlet, HugeAlphaIsNearlyIid) {
    const auto ds = blobs(4, 500);
    const auto p = partition_dirichlet(ds, 5, 1e6, 9);
    for (const auto& c : p.clients) {
        const auto counts = class_counts(ds, c);
        for (std::size_t k : counts) EXPECT_NEAR(static_cast<double>(k) / c.size(), 0.25, 0.05);
    }
}

TEST(PartitionDirichlet, SmallAlphaIsSkewedGolden) {
    const auto ds = blobs(2, 200);
    const auto p = partition_dirichlet(ds, 10, 0.1, 2024);
    double best = 0.0;
    for (const auto& c : p.clients) {
        const auto counts = class_counts(ds, c);
        best = std::max(best, static_cast<double>(*std::max_element(counts.begin(), counts.end())) / c.size());
    }
    EXPECT_GT(best, 0.8);
}

TEST(PartitionDirichlet, RejectsNonPositiveAlpha) {
    const auto ds = blobs();
    EXPECT_THROW(partition_dirichlet(ds, 4, 0.0, 1), ValidationError);
    EXPECT_THROW(partition_dirichlet(ds, 4, -1.0, 1), ValidationError);
}

TEST(PartitionLaws, RandomizedSweep) {
    const auto ds = blobs(5, 30);
    std::vector<std::size_t> all(ds.size());
    std::iota(all.begin(), all.end(), 0);
    for (std::uint64_t seed = 0; seed < 40; ++seed) {
        const std::size_t k = 1 + seed % 23;
        const double alpha = std::pow(10.0, -2.0 + (seed % 9) * 0.5);
        expect_partition_laws(partition_dirichlet(ds, k, alpha, seed), all);
        expect_partition_laws(partition_iid(ds, k, seed), all);
    }
    // Extreme skew with many clients forces the empty-client repair path.
    expect_partition_laws(partition_dirichlet(ds, 100, 0.01, 3), all);
}

TEST(PartitionDirichlet, EntropyGrowsWithAlpha) {
    const auto ds = blobs(4, 100);
    double low = 0.0, high = 0.0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        low += mean_label_entropy(ds, partition_dirichlet(ds, 10, 0.1, seed));
        high += mean_label_entropy(ds, partition_dirichlet(ds, 10, 10.0, seed));
    }
    EXPECT_LT(low, high);
}

TEST(Split, DisjointStratifiedSets) {
    const auto ds = blobs();
    const auto s = split_dataset(ds, 0.25, 40, 4);
    EXPECT_EQ(s.test.size(), 200u);
    EXPECT_EQ(s.holdout.size(), 40u);
    EXPECT_EQ(s.train.size(), 560u);
    EXPECT_EQ(class_counts(ds, s.holdout), (std::vector<std::size_t>{10, 10, 10, 10}));
    std::vector<std::size_t> all = s.train;
    all.insert(all.end(), s.holdout.begin(), s.holdout.end());
    all.insert(all.end(), s.test.begin(), s.test.end());
    std::sort(all.begin(), all.end());
    EXPECT_TRUE(std::adjacent_find(all.begin(), all.end()) == all.end());
    EXPECT_EQ(all.size(), 800u);
}

TEST(Distillation, HoldoutNeverLeaksIntoClients) {
    const auto ds = blobs();
    const auto s = split_dataset(ds, 0.2, 200, 1);
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        Partition p = partition_dirichlet(ds, s.train, 8, 0.5, seed);
        p.reserved = s.holdout;
        EXPECT_NO_THROW(check_partition(p, ds.size()));
        DistillationSource src({}, ds, s.holdout);
        const auto batch = src.draw(200, seed);
        EXPECT_EQ(batch.size(), 200u);
        EXPECT_EQ(batch.features.shape(), (Shape{200, 6}));
        const std::set<std::size_t> drawn(batch.source_indices.begin(), batch.source_indices.end());
        for (const auto& c : p.clients)
            for (std::size_t i : c) EXPECT_FALSE(drawn.count(i));
    }
}

TEST(Distillation, CheckPartitionCatchesLeaks) {
    Partition p{{{0, 1}, {2}}, {2}};
    EXPECT_THROW(check_partition(p, 4), ValidationError);
    Partition overlap{{{0, 1}, {1}}, {}};
    EXPECT_THROW(check_partition(overlap, 4), ValidationError);
    Partition empty{{{0}, {}}, {}};
    EXPECT_THROW(check_partition(empty, 4), ValidationError);
}

TEST(Distillation, HoldoutExhaustionIsSourceError) {
    const auto ds = blobs();
    const auto s = split_dataset(ds, 0.2, 20, 1);
    DistillationSource src({}, ds, s.holdout);
    EXPECT_THROW(src.draw(21, 0), SourceError);
    DistillationSource none({}, ds, {});
    EXPECT_THROW(none.draw(1, 0), SourceError);
}

TEST(Distillation, PromptsNamingClassesRestrictHoldout) {
    const auto ds = blobs();
    const auto s = split_dataset(ds, 0.2, 100, 1);
    DistillationSourceConfig cfg;
    cfg.prompts = {"a photo of CLASS1", "class3 in the wild", "class10 is not a class"};
    DistillationSource src(cfg, ds, s.holdout);
    const auto batch = src.draw(40, 2);
    EXPECT_EQ(batch.prompts, cfg.prompts);
    std::vector<std::size_t> counts(4, 0);
    for (std::size_t i : batch.source_indices) ++counts[ds.labels[i]];
    EXPECT_EQ(counts, (std::vector<std::size_t>{0, 20, 0, 20}));
    EXPECT_EQ(classes_named_in_prompts(ds.class_names, cfg.prompts), (std::vector<std::size_t>{1, 3}));
}

TEST(Distillation, NoiseIsDeterministicAndInRange) {
    const auto ds = blobs();
    DistillationSourceConfig cfg;
    cfg.kind = DistillationKind::noise;
    cfg.noise_low = -1.0;
    cfg.noise_high = 2.0;
    DistillationSource src(cfg, ds, {});
    const auto a = src.draw(50, 7);
    EXPECT_EQ(a.features, src.draw(50, 7).features);
    EXPECT_NE(a.features, src.draw(50, 8).features);
    EXPECT_EQ(a.features.shape(), (Shape{50, 6}));
    for (double v : a.features.values()) {
        EXPECT_GE(v, -1.0);
        EXPECT_LT(v, 2.0);
    }
}

TEST(Distillation, DirectorySourceLoadsImages) {
    TempDir dir("fedtsa_distill_dir");
    for (int i = 0; i < 5; ++i) write_netpbm(dir.path / ("img" + std::to_string(i) + ".pgm"), gray(2, 3, i / 5.0));
    LabeledDataset ds;
    ds.name = "tiny";
    ds.feature_shape = {1, 2, 3};
    ds.class_count = 2;
    ds.class_names = {"a", "b"};
    ds.features.assign(12, 0.0);
    ds.labels = {0, 1};
    DistillationSourceConfig cfg;
    cfg.kind = DistillationKind::directory;
    cfg.directory = dir.path;
    DistillationSource src(cfg, ds, {});
    const auto batch = src.draw(4, 1);
    EXPECT_EQ(batch.features.shape(), (Shape{4, 1, 2, 3}));
    EXPECT_THROW(src.draw(6, 1), SourceError);

    TempDir empty("fedtsa_distill_empty");
    cfg.directory = empty.path;
    EXPECT_THROW(DistillationSource(cfg, ds, {}).draw(1, 1), SourceError);
}

TEST(Distillation, KindNamesRoundTrip) {
    for (auto k : {DistillationKind::holdout, DistillationKind::directory, DistillationKind::noise})
        EXPECT_EQ(distillation_kind_from_string(to_string(k)), k);
    EXPECT_THROW(distillation_kind_from_string("diffusion"), ValidationError);
}
