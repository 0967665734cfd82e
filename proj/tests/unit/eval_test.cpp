#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "pforge/eval.hpp"
#include "test_support.hpp"
#include "toy_model.hpp"

namespace pforge::eval {
namespace {

using nlohmann::json;

TEST(Entropy, ExactValues) {
  Bytes all(256);
  for (int i = 0; i < 256; ++i) all[i] = static_cast<std::uint8_t>(i);
  EXPECT_NEAR(entropy(all), 8.0, 1e-12);
  EXPECT_NEAR(entropy(Bytes(1000, 0x41)), 0.0, 1e-12);
  Bytes alt(1000);
  for (std::size_t i = 0; i < alt.size(); ++i) alt[i] = i % 2 ? 0xAA : 0x55;
  EXPECT_NEAR(entropy(alt), 1.0, 1e-12);
  EXPECT_THROW(entropy(Bytes{}), EvalError);
}

TEST(Entropy, BoundsOnRandomInputs) {
  for (std::uint64_t s = 0; s < 50; ++s) {
    auto b = testing::random_bytes(1 + s * 37, s);
    const double h = entropy(b);
    EXPECT_GE(h, 0.0);
    EXPECT_LE(h, 8.0);
    EXPECT_LE(h, std::log2(static_cast<double>(b.size())) + 1e-12);
  }
}

TEST(EntropyReport, ZeroPayloadIntoZeroRegion) {
  pe::FixtureSpec spec;
  spec.sections.push_back({".text", testing::random_bytes(0x200, 1), 0, true});
  spec.sections.push_back({".data", Bytes(0x100, 0), 0x200, false});
  auto bytes = pe::make_fixture(spec);
  auto layout = pe::parse(bytes);
  auto injected = pe::inject_slack(layout, Bytes(0x80, 0), pe::find_slack(layout).front());
  auto out = pe::serialize(injected.layout);
  ASSERT_EQ(out, bytes);
  auto report = entropy_report(bytes, out, injected.record, "zero");
  const auto& r = report.records.at(0);
  EXPECT_EQ(r["whole_before"], r["whole_after"]);
  EXPECT_EQ(r["payload_entropy"].get<double>(), 0.0);
  EXPECT_EQ(r["region_before"].get<double>(), 0.0);
  ASSERT_EQ(r["sections"].size(), 2u);
  EXPECT_EQ(r["sections"][1]["before"], r["sections"][1]["after"]);
}

TEST(EntropyReport, OverlayHasNoPriorRegion) {
  auto file = testing::random_bytes(500, 2);
  auto injected = pe::append_overlay(file, Bytes(100, 7));
  auto report = entropy_report(file, injected.bytes, injected.record);
  EXPECT_TRUE(report.records[0]["region_before"].is_null());
  EXPECT_EQ(report.records[0]["payload_entropy"].get<double>(), 0.0);
  EXPECT_TRUE(report.records[0]["sections"].empty());
  EXPECT_EQ(report.aggregates["files"], 1);
}

TEST(MoveBlocks, PermutesWholeBlocks) {
  Bytes b(8 * 4);
  for (std::size_t i = 0; i < b.size(); ++i) b[i] = static_cast<std::uint8_t>(i / 4);
  auto moved = move_blocks(b, 4, 5, 3, 1);
  std::vector<int> order;
  for (std::size_t w = 0; w < 8; ++w) order.push_back(moved[w * 4]);
  EXPECT_EQ(order, (std::vector<int>{0, 5, 6, 7, 1, 2, 3, 4}));
  EXPECT_EQ(move_blocks(moved, 4, 1, 3, 5), b);
  EXPECT_EQ(move_blocks(b, 4, 2, 2, 2), b);
  EXPECT_THROW(move_blocks(b, 4, 7, 2, 0), EvalError);
  EXPECT_THROW(move_blocks(Bytes(7), 4, 0, 1, 0), EvalError);
}

TEST(MoveBlocks, RoundTripProperty) {
  Rng rng(3);
  for (int t = 0; t < 200; ++t) {
    const std::size_t c = rng.between(1, 16), n = rng.between(1, 30);
    auto b = testing::random_bytes(c * n, t);
    const std::size_t count = rng.between(0, n), from = rng.between(0, n - count), to = rng.between(0, n - count);
    auto moved = move_blocks(b, c, from, count, to);
    ASSERT_EQ(moved.size(), b.size());
    ASSERT_EQ(move_blocks(moved, c, to, count, from), b);
  }
}

TEST(Relocate, AlignedMovesPayloadBlocks) {
  auto file = testing::random_bytes(64 * 10 - 20, 5);
  auto payload = testing::random_bytes(148, 6);
  auto injected = pe::append_overlay(file, payload);
  ASSERT_EQ(injected.bytes.size(), 64u * 12);
  auto moved = relocate_aligned(injected.bytes, injected.record, 64, 2);
  // Blocks 9..11 carry the payload (block 9 starts with 44 original bytes).
  EXPECT_TRUE(std::equal(injected.bytes.begin() + 9 * 64, injected.bytes.end(), moved.begin() + 2 * 64));
  EXPECT_TRUE(std::equal(injected.bytes.begin(), injected.bytes.begin() + 2 * 64, moved.begin()));
  EXPECT_EQ(move_blocks(moved, 64, 2, 3, 9), injected.bytes);
  EXPECT_THROW(relocate_aligned(injected.bytes, injected.record, 64, 7), EvalError);
}

TEST(Relocate, LiteralInsertsPayloadAtOffset) {
  auto file = testing::random_bytes(64 * 5 + 10, 5);
  auto payload = testing::random_bytes(118, 6);
  auto injected = pe::append_overlay(file, payload);
  auto out = relocate_literal(injected.bytes, injected.record, 64, 2, 1);
  const std::size_t pos = 2 * 64 + 10 + 1;
  ASSERT_EQ(out.size(), injected.bytes.size());
  EXPECT_TRUE(std::equal(file.begin(), file.begin() + pos, out.begin()));
  EXPECT_TRUE(std::equal(payload.begin(), payload.end(), out.begin() + pos));
  EXPECT_TRUE(std::equal(file.begin() + pos, file.end(), out.begin() + pos + payload.size()));
  EXPECT_EQ(relocate_literal(injected.bytes, injected.record, 64, 5, 0), injected.bytes);
}

TEST(Summarize, EvasionAggregates) {
  std::vector<json> recs = {{{"evaded", true}, {"iterations", 2}, {"payload_entropy", 4.0}, {"attention_shift", true}},
                            {{"evaded", true}, {"iterations", 4}, {"payload_entropy", 5.0}, {"attention_shift", false}}};
  auto a = summarize("evasion", recs);
  EXPECT_EQ(a["rate"], 1.0);
  EXPECT_EQ(a["mean_iterations"], 3.0);
  EXPECT_EQ(a["mean_payload_entropy"], 4.5);
  EXPECT_EQ(a["attention_shift_rate"], 0.5);
  EXPECT_THROW(summarize("bogus", recs), EvalError);
}

TEST(Summarize, SizeSweepSpread) {
  std::vector<json> recs;
  for (int i = 0; i < 4; ++i) recs.push_back({{"size", 128}, {"evaded", i < 3}});
  for (int i = 0; i < 4; ++i) recs.push_back({{"size", 256}, {"evaded", true}});
  auto a = summarize("size_sweep", recs);
  EXPECT_DOUBLE_EQ(a["spread"].get<double>(), 0.25);
  EXPECT_EQ(a["sizes"].size(), 2u);
}

TEST(Report, WritesJsonAndCsv) {
  testing::ScratchDir dir("report");
  EvalReport r;
  r.experiment = "evasion";
  r.records = {{{"file", "a,b"}, {"evaded", true}, {"iterations", 1}},
               {{"file", "c"}, {"evaded", false}, {"iterations", 3}}};
  r.aggregates = summarize(r.experiment, r.records);
  r.write(dir / "out");
  std::ifstream j(dir / "out.json");
  auto parsed = json::parse(j);
  EXPECT_EQ(parsed["experiment"], "evasion");
  EXPECT_EQ(parsed["aggregates"], summarize("evasion", parsed["records"].get<std::vector<json>>()));
  std::ifstream c(dir / "out.csv");
  std::stringstream ss;
  ss << c.rdbuf();
  EXPECT_EQ(ss.str().substr(0, ss.str().find('\n')), "evaded,file,iterations");
  EXPECT_NE(ss.str().find("\"a,b\""), std::string::npos);
}

TEST(SweepSizes, DefaultSeries) { EXPECT_EQ(default_sweep_sizes(64), (std::vector<std::size_t>{128, 192, 256, 320})); }

class EvalOnToyModel : public ::testing::Test {
 protected:
  const testing::ToyWorld& world = testing::toy_world();

  std::vector<NamedFile> named(std::size_t n) const {
    auto files = world.detected_malicious();
    std::vector<NamedFile> out;
    for (std::size_t i = 0; i < std::min(n, files.size()); ++i) out.push_back({"f" + std::to_string(i), files[i], i % 5});
    return out;
  }
};

TEST_F(EvalOnToyModel, EvasionRecordsMatchResults) {
  auto files = named(8);
  auto run = evasion_rate(world.params, files, attack::AttackConfig{}, pe::InjectionMode::overlay, 4);
  ASSERT_EQ(run.report.records.size(), files.size());
  ASSERT_EQ(run.attacked.size(), files.size());
  std::size_t evaded = 0;
  for (std::size_t i = 0; i < files.size(); ++i) {
    const auto& rec = run.report.records[i];
    const auto& res = run.attacked[i].result;
    EXPECT_EQ(rec["file"], files[i].name);
    EXPECT_EQ(rec["evaded"], res.evaded);
    EXPECT_EQ(rec["score_after"].get<double>(), model::predict_file(world.params, res.modified));
    EXPECT_DOUBLE_EQ(rec["payload_entropy"].get<double>(), entropy(res.payload));
    evaded += res.evaded;
  }
  EXPECT_DOUBLE_EQ(run.report.aggregates["rate"].get<double>(), static_cast<double>(evaded) / files.size());
  EXPECT_EQ(run.report.config["mode"], "overlay");

  auto serial = evasion_rate(world.params, files, attack::AttackConfig{}, pe::InjectionMode::overlay, 1);
  EXPECT_EQ(serial.report.to_json(), run.report.to_json());
}

TEST_F(EvalOnToyModel, AllEvadedGivesRateOne) {
  auto files = named(20);
  auto run = evasion_rate(world.params, files, attack::AttackConfig{}, pe::InjectionMode::overlay, 4);
  std::vector<NamedFile> evaded;
  for (std::size_t i = 0; i < files.size(); ++i) {
    if (run.attacked[i].result.evaded) evaded.push_back(files[i]);
  }
  ASSERT_FALSE(evaded.empty());
  auto again = evasion_rate(world.params, evaded, attack::AttackConfig{}, pe::InjectionMode::overlay, 4);
  EXPECT_EQ(again.report.aggregates["rate"], 1.0);
}

TEST_F(EvalOnToyModel, AlignedRelocationIsBitwiseInvariant) {
  auto files = named(20);
  auto run = evasion_rate(world.params, files, attack::AttackConfig{}, pe::InjectionMode::overlay, 4);
  auto report = spatial_invariance(world.params, run.attacked);
  ASSERT_FALSE(report.records.empty());
  for (const auto& r : report.records) {
    EXPECT_TRUE(r["bitwise_equal"].get<bool>()) << r.dump();
    EXPECT_TRUE(r["still_evading"].get<bool>());
    EXPECT_GE(r["targets"].size(), 3u);
  }
  EXPECT_EQ(report.aggregates["invariance_rate"], 1.0);
}

TEST_F(EvalOnToyModel, TransferSelfPairEvades) {
  auto files = named(20);
  auto run = evasion_rate(world.params, files, attack::AttackConfig{}, pe::InjectionMode::overlay, 4);
  for (std::size_t i = 0; i < files.size(); ++i) {
    if (!run.attacked[i].result.evaded) continue;
    auto report = transfer(world.params, run.attacked[i], std::span(&files[i], 1), 1);
    ASSERT_EQ(report.records.size(), 1u);
    EXPECT_TRUE(report.records[0]["self"].get<bool>());
    EXPECT_TRUE(report.records[0]["transfer_evaded"].get<bool>());
    return;
  }
  FAIL() << "no evaded donor";
}

TEST_F(EvalOnToyModel, TransferRejectsBenignRecipient) {
  auto files = named(3);
  auto run = evasion_rate(world.params, files, attack::AttackConfig{}, pe::InjectionMode::overlay, 4);
  std::vector<NamedFile> benign{{"b", world.benign_scored().front(), std::nullopt}};
  try {
    transfer(world.params, run.attacked[0], benign, 1);
    FAIL();
  } catch (const attack::AttackError& e) {
    EXPECT_EQ(e.kind(), attack::AttackError::Kind::NotDetected);
  }
}

TEST_F(EvalOnToyModel, TransferIsDeterministic) {
  auto files = named(6);
  auto run = evasion_rate(world.params, files, attack::AttackConfig{}, pe::InjectionMode::overlay, 4);
  auto a = transfer_matrix(world.params, run.attacked, files, 3);
  auto b = transfer_matrix(world.params, run.attacked, files, 3);
  EXPECT_EQ(a.to_json(), b.to_json());
  EXPECT_EQ(a.records.size(), files.size() * files.size());
  EXPECT_EQ(a.aggregates["cross_pairs"], files.size() * (files.size() - 1));
}

TEST_F(EvalOnToyModel, SingleSizeSweepMatchesEvasion) {
  // Files sharing L mod c share the minimal payload size.
  auto all = world.detected_malicious();
  std::map<std::size_t, std::vector<NamedFile>> by_k;
  for (std::size_t i = 0; i < all.size(); ++i) {
    by_k[attack::payload_size(all[i].size(), 64)].push_back({"f" + std::to_string(i), all[i], std::nullopt});
  }
  auto best = std::max_element(by_k.begin(), by_k.end(),
                               [](const auto& a, const auto& b) { return a.second.size() < b.second.size(); });
  ASSERT_GE(best->second.size(), 2u);
  attack::AttackConfig cfg;
  auto run = evasion_rate(world.params, best->second, cfg, pe::InjectionMode::overlay, 4);
  auto sweep = size_sweep(world.params, best->second, {best->first}, cfg, 4);
  EXPECT_EQ(sweep.aggregates["sizes"][0]["rate"], run.report.aggregates["rate"]);
  for (std::size_t i = 0; i < best->second.size(); ++i) {
    EXPECT_EQ(sweep.records[i]["score_after"], run.report.records[i]["score_after"]);
  }
}

TEST_F(EvalOnToyModel, SweepRejectsTooSmallSize) {
  auto files = named(2);
  try {
    size_sweep(world.params, files, {64}, attack::AttackConfig{}, 1);
    FAIL();
  } catch (const attack::AttackError& e) {
    EXPECT_EQ(e.kind(), attack::AttackError::Kind::InvalidSize);
  }
}

TEST_F(EvalOnToyModel, SweepRecordsEverySizeAndFile) {
  auto files = named(4);
  auto report = size_sweep(world.params, files, {320, 128, 192, 128}, attack::AttackConfig{}, 4);
  EXPECT_EQ(report.records.size(), 12u);
  EXPECT_EQ(report.config["sizes"], (std::vector<std::size_t>{128, 192, 320}));
  for (const auto& r : report.records) EXPECT_LE(r["k"].get<std::size_t>(), r["size"].get<std::size_t>());
}

TEST_F(EvalOnToyModel, ActivationTraceMarksPayload) {
  auto files = named(5);
  auto run = evasion_rate(world.params, files, attack::AttackConfig{}, pe::InjectionMode::overlay, 4);
  const auto& res = run.attacked[0].result;
  auto t = activation_trace(world.params, res.modified, res.injection);
  EXPECT_EQ(t.mean_activation.size(), res.modified.size() / 64);
  EXPECT_EQ(t.payload_end, t.mean_activation.size());
  EXPECT_EQ(t.payload_begin, res.injection.file_offset / 64);
  EXPECT_EQ(t.filter_argmax.size(), 16u);
  auto plain = activation_trace(world.params, files[0].bytes);
  EXPECT_EQ(plain.payload_begin, plain.payload_end);
  EXPECT_FALSE(plain.attention_shifted());

  testing::ScratchDir dir("trace");
  write_trace_csv(t, dir / "t.csv");
  std::ifstream in(dir / "t.csv");
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "window_index,mean_activation,in_payload");
}

TEST(ActivationTrace, ZeroLinearBranchIsFlat) {
  auto p = model::init_params(model::ModelConfig::desk(), 1);
  std::fill(p.conv_a.data.begin(), p.conv_a.data.end(), 0.0);
  std::fill(p.bias_a.begin(), p.bias_a.end(), 0.0);
  auto t = activation_trace(p, testing::random_bytes(640, 2));
  for (double v : t.mean_activation) EXPECT_EQ(v, 0.0);
}

TEST_F(EvalOnToyModel, EntropySuiteCoversEveryFile) {
  auto files = named(5);
  auto run = evasion_rate(world.params, files, attack::AttackConfig{}, pe::InjectionMode::overlay, 4);
  auto report = entropy_suite(run.attacked);
  ASSERT_EQ(report.records.size(), files.size());
  for (std::size_t i = 0; i < files.size(); ++i) {
    EXPECT_DOUBLE_EQ(report.records[i]["payload_entropy"].get<double>(), entropy(run.attacked[i].result.payload));
  }
}

}  // namespace
}  // namespace pforge::eval
