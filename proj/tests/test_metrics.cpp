#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "mpers/metrics.hpp"

using namespace mpers;

TEST_CASE("accumulate counts into (gt, pred) cells and skips ignored pixels") {
    ConfusionMatrix cm(3);
    LabelRaster gt{2, 3, {0, 0, 1, 1, 2, kIgnoreLabel}};
    LabelRaster pred{2, 3, {0, 1, 1, 0, 2, 2}};
    accumulate(cm, pred, gt);
    CHECK(cm.at(0, 0) == 1);
    CHECK(cm.at(0, 1) == 1);
    CHECK(cm.at(1, 1) == 1);
    CHECK(cm.at(1, 0) == 1);
    CHECK(cm.at(2, 2) == 1);
    CHECK(cm.total() == 5);  // ignored pixel not counted

    CHECK_THROWS_AS(accumulate(cm, LabelRaster{1, 1, {0}}, gt), DimensionError);
    try {
        LabelRaster bad{2, 3, {0, 0, 1, 1, 2, 5}};
        accumulate(cm, pred, bad);
        FAIL("expected LabelError");
    } catch (const LabelError& e) {
        CHECK(std::string(e.what()).find("(1,2)") != std::string::npos);
    }
}

TEST_CASE("hand-computed 2x2 confusion matrix") {
    // cm = [[3,1],[1,3]]: class 0 has TP=3, FP=1, FN=1
    ConfusionMatrix cm(2);
    cm.at(0, 0) = 3;
    cm.at(0, 1) = 1;
    cm.at(1, 0) = 1;
    cm.at(1, 1) = 3;
    auto pc = per_class(cm);
    CHECK(pc[0].iou == doctest::Approx(0.6).epsilon(1e-9));
    CHECK(pc[0].f1 == doctest::Approx(0.75).epsilon(1e-9));
    CHECK(pc[1].iou == doctest::Approx(0.6).epsilon(1e-9));
    auto r = summarize(cm);
    CHECK(r.miou == doctest::Approx(0.6).epsilon(1e-9));
    CHECK(r.mf1 == doctest::Approx(0.75).epsilon(1e-9));
    CHECK(r.oa == doctest::Approx(0.75).epsilon(1e-9));
}

TEST_CASE("merging matrices equals accumulating everything at once") {
    std::mt19937_64 rng(5);
    ConfusionMatrix whole(4);
    ConfusionMatrix part1(4), part2(4);
    for (int i = 0; i < 1000; ++i) {
        const int g = static_cast<int>(rng() % 4), p = static_cast<int>(rng() % 4);
        whole.at(g, p)++;
        (i % 2 == 0 ? part1 : part2).at(g, p)++;
    }
    part1.merge(part2);
    CHECK(part1.counts == whole.counts);
    auto a = summarize(part1);
    auto b = summarize(whole);
    CHECK(a.miou == b.miou);
    CHECK(a.oa == b.oa);
}

TEST_CASE("classes absent from both gt and prediction are excluded from means") {
    ConfusionMatrix cm(3);
    cm.at(0, 0) = 8;
    cm.at(0, 1) = 2;
    cm.at(1, 1) = 6;
    cm.at(1, 0) = 4;
    // class 2 never appears
    auto pc = per_class(cm);
    CHECK_FALSE(pc[2].defined);
    auto r = summarize(cm);
    const double iou0 = 8.0 / (8 + 4 + 2), iou1 = 6.0 / (6 + 2 + 4);
    CHECK(r.miou == doctest::Approx((iou0 + iou1) / 2.0).epsilon(1e-9));
}

TEST_CASE("F1 = 2*IoU/(1+IoU) for every defined class") {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        ConfusionMatrix cm(5);
        for (int i = 0; i < 500; ++i) cm.at(rng() % 5, rng() % 5)++;
        for (const auto& c : per_class(cm)) {
            if (!c.defined) continue;
            CHECK(std::abs(c.f1 - 2.0 * c.iou / (1.0 + c.iou)) < 1e-9);
        }
    }
}

TEST_CASE("overall accuracy converges to 0.5 for a fair coin prediction") {
    std::mt19937_64 rng(13);
    ConfusionMatrix cm(2);
    const int n = 1'000'000;
    LabelRaster gt{1000, 1000, std::vector<uint8_t>(n)};
    LabelRaster pred{1000, 1000, std::vector<uint8_t>(n)};
    for (int i = 0; i < n; ++i) {
        gt.labels[i] = static_cast<uint8_t>(rng() & 1u);
        pred.labels[i] = static_cast<uint8_t>(rng() & 1u);
    }
    accumulate(cm, pred, gt);
    CHECK(summarize(cm).oa == doctest::Approx(0.5).epsilon(0.02));  // ~0.5 within a few sigma
    CHECK(std::abs(summarize(cm).oa - 0.5) < 0.01);
}

TEST_CASE("metrics are invariant under a joint relabeling of classes") {
    std::mt19937_64 rng(17);
    ConfusionMatrix cm(4);
    for (int i = 0; i < 2000; ++i) cm.at(rng() % 4, rng() % 4)++;
    const int perm[4] = {2, 0, 3, 1};
    ConfusionMatrix relabeled(4);
    for (int g = 0; g < 4; ++g)
        for (int p = 0; p < 4; ++p) relabeled.at(perm[g], perm[p]) = cm.at(g, p);
    auto a = summarize(cm);
    auto b = summarize(relabeled);
    CHECK(a.miou == doctest::Approx(b.miou).epsilon(1e-12));
    CHECK(a.mf1 == doctest::Approx(b.mf1).epsilon(1e-12));
    CHECK(a.oa == doctest::Approx(b.oa).epsilon(1e-12));
}

TEST_CASE("empty matrix is rejected; json and table render") {
    ConfusionMatrix cm(2);
    CHECK_THROWS_AS(summarize(cm), ContractError);

    cm.at(0, 0) = 3;
    cm.at(0, 1) = 1;
    cm.at(1, 0) = 1;
    cm.at(1, 1) = 3;
    auto r = summarize(cm);
    auto j = report_to_json(r, {"background", "building"});
    CHECK(j.at("miou").get<double>() == doctest::Approx(0.6));
    CHECK(j.at("classes")[1].at("name").get<std::string>() == "building");
    std::string table = report_to_table(r, {"background", "building"});
    CHECK(table.find("building") != std::string::npos);
    CHECK(table.find("mIoU") != std::string::npos);
    CHECK(table.find("60.00") != std::string::npos);
}
