#include <gtest/gtest.h>

#include <cstring>
#include <string>
#include <vector>

#include "pforge/corpus.hpp"
#include "pforge/pe.hpp"
#include "test_support.hpp"

namespace pforge::pe {
namespace {

// Reads the section table straight from the bytes, without going through
// parse(), so injector output can be checked against an independent reader.
struct RawSection {
  std::string name;
  std::uint32_t virtual_size, virtual_address, size_of_raw_data, pointer_to_raw_data, characteristics;
};

std::vector<RawSection> raw_sections(const Bytes& b) {
  const std::uint32_t pe = load_u32(b, 0x3C);
  const std::uint16_t count = load_u16(b, pe + 6);
  const std::uint16_t opt_size = load_u16(b, pe + 20);
  std::size_t at = pe + 24 + opt_size;
  std::vector<RawSection> out;
  for (std::uint16_t i = 0; i < count; ++i, at += 40) {
    char name[9] = {};
    std::memcpy(name, b.data() + at, 8);
    out.push_back({name, load_u32(b, at + 8), load_u32(b, at + 12), load_u32(b, at + 16), load_u32(b, at + 20),
                   load_u32(b, at + 36)});
  }
  return out;
}

FixtureSpec two_sections(std::uint32_t data_slack = 0x200) {
  FixtureSpec spec;
  spec.sections.push_back({".text", testing::random_bytes(0x300, 1), 0x100, true});
  spec.sections.push_back({".data", testing::random_bytes(0x500, 2), data_slack, false});
  spec.seed = 7;
  return spec;
}

TEST(PeParse, TwoSectionRoundTrip) {
  auto bytes = make_fixture(two_sections());
  auto layout = parse(bytes);
  ASSERT_EQ(layout.sections.size(), 2u);
  EXPECT_EQ(layout.sections[0].header.name_string(), ".text");
  EXPECT_TRUE(layout.sections[0].header.executable());
  EXPECT_FALSE(layout.sections[1].header.executable());
  EXPECT_EQ(serialize(layout), bytes);
  EXPECT_EQ(layout.file_size(), bytes.size());
  EXPECT_FALSE(check_layout(layout).has_value());
}

TEST(PeParse, FieldsMatchIndependentReader) {
  auto bytes = make_fixture(two_sections());
  auto layout = parse(bytes);
  auto raw = raw_sections(bytes);
  ASSERT_EQ(raw.size(), layout.sections.size());
  for (std::size_t i = 0; i < raw.size(); ++i) {
    const auto& h = layout.sections[i].header;
    EXPECT_EQ(h.name_string(), raw[i].name);
    EXPECT_EQ(h.virtual_size, raw[i].virtual_size);
    EXPECT_EQ(h.virtual_address, raw[i].virtual_address);
    EXPECT_EQ(h.size_of_raw_data, raw[i].size_of_raw_data);
    EXPECT_EQ(h.pointer_to_raw_data, raw[i].pointer_to_raw_data);
    EXPECT_EQ(h.characteristics, raw[i].characteristics);
    EXPECT_EQ(layout.sections[i].data,
              Bytes(bytes.begin() + raw[i].pointer_to_raw_data,
                    bytes.begin() + raw[i].pointer_to_raw_data + raw[i].size_of_raw_data));
  }
}

TEST(PeParse, RoundTripWithOverlayAndManySections) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    FixtureSpec spec;
    spec.seed = seed;
    const auto n = rng.between(1, 6);
    for (std::uint64_t i = 0; i < n; ++i) {
      spec.sections.push_back({".s" + std::to_string(i), testing::random_bytes(rng.between(0, 3000), seed * 10 + i),
                               static_cast<std::uint32_t>(rng.between(0, 3) * 0x100), i == 0});
    }
    if (rng.below(2)) spec.overlay = testing::random_bytes(rng.between(1, 900), seed);
    spec.tight_headers = rng.below(3) == 0;
    auto bytes = make_fixture(spec);
    auto layout = parse(bytes);
    EXPECT_EQ(serialize(layout), bytes) << "seed " << seed;
    EXPECT_EQ(layout.overlay, spec.overlay);
    EXPECT_FALSE(check_layout(layout).has_value());
  }
}

TEST(PeParse, RandomBytesAreNotPe) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    auto bytes = testing::random_bytes(512, seed);
    bytes[0] = 'X';
    try {
      parse(bytes);
      FAIL() << "parsed random bytes";
    } catch (const PeError& e) {
      EXPECT_EQ(e.kind(), PeError::Kind::NotPe);
    }
    EXPECT_FALSE(looks_like_pe(bytes));
  }
  try {
    parse(Bytes{'M', 'Z'});
    FAIL();
  } catch (const PeError& e) {
    EXPECT_EQ(e.kind(), PeError::Kind::NotPe);
  }
}

TEST(PeParse, TruncatedBeforeLastSection) {
  auto bytes = make_fixture(two_sections());
  auto layout = parse(bytes);
  const auto& last = layout.sections.back().header;
  bytes.resize(last.pointer_to_raw_data + last.size_of_raw_data / 2);
  try {
    parse(bytes);
    FAIL() << "parsed truncated file";
  } catch (const PeError& e) {
    EXPECT_EQ(e.kind(), PeError::Kind::Truncated);
  }
}

TEST(PeParse, Pe32PlusMagicAccepted) {
  FixtureSpec spec = two_sections();
  auto bytes = make_fixture(spec);
  auto layout = parse(bytes);
  const std::size_t opt = layout.pe_offset + 24;
  store_u16(bytes, opt, 0x20B);
  auto plus = parse(bytes);
  EXPECT_EQ(plus.optional_header.magic, 0x20B);
  EXPECT_EQ(serialize(plus), bytes);
}

TEST(Slack, RegionFromHeaderFields) {
  FixtureSpec spec;
  spec.header_room = 0x600;
  spec.sections.push_back({".data", testing::random_bytes(0x400, 3), 0x200, false});
  auto layout = parse(make_fixture(spec));
  const auto& h = layout.sections[0].header;
  ASSERT_EQ(h.virtual_size, 0x400u);
  ASSERT_EQ(h.size_of_raw_data, 0x600u);
  ASSERT_EQ(h.pointer_to_raw_data, 0x800u);
  auto regions = find_slack(layout);
  ASSERT_EQ(regions.size(), 1u);
  EXPECT_EQ(regions[0].file_offset, 0xC00u);
  EXPECT_EQ(regions[0].length, 0x200u);
}

TEST(Slack, NoneWhenVirtualEqualsRaw) {
  FixtureSpec spec;
  spec.sections.push_back({".a", testing::random_bytes(0x200, 1), 0, true});
  spec.sections.push_back({".b", testing::random_bytes(0x400, 2), 0, false});
  EXPECT_TRUE(find_slack(parse(make_fixture(spec))).empty());
}

TEST(Slack, LargestFirst) {
  FixtureSpec spec;
  spec.sections.push_back({".a", testing::random_bytes(0x200, 1), 0x200, true});
  spec.sections.push_back({".b", testing::random_bytes(0x200, 2), 0x400, false});
  auto regions = find_slack(parse(make_fixture(spec)));
  ASSERT_EQ(regions.size(), 2u);
  EXPECT_EQ(regions[0].length, 0x400u);
  EXPECT_EQ(regions[0].section_index, 1u);
  EXPECT_EQ(regions[1].length, 0x200u);
}

TEST(Slack, OnlySlackSectionReported) {
  FixtureSpec spec;
  spec.sections.push_back({".a", testing::random_bytes(0x200, 1), 0, true});
  spec.sections.push_back({".b", testing::random_bytes(0x200, 2), 0x200, false});
  auto regions = find_slack(parse(make_fixture(spec)));
  ASSERT_EQ(regions.size(), 1u);
  EXPECT_EQ(regions[0].length, 0x200u);
}

TEST(InjectSlack, ExactFitChangesOnlyTheRegion) {
  auto bytes = make_fixture(two_sections());
  auto layout = parse(bytes);
  auto region = find_slack(layout).front();
  ASSERT_EQ(region.length, 0x200u);
  auto payload = testing::random_bytes(0x200, 99);
  auto out = serialize(inject_slack(layout, payload, region).layout);
  ASSERT_EQ(out.size(), bytes.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const bool inside = i >= region.file_offset && i < region.file_offset + 0x200;
    if (inside) {
      ASSERT_EQ(out[i], payload[i - region.file_offset]) << i;
    } else {
      ASSERT_EQ(out[i], bytes[i]) << i;
    }
  }
}

TEST(InjectSlack, TooLarge) {
  auto layout = parse(make_fixture(two_sections()));
  auto region = find_slack(layout).front();
  try {
    inject_slack(layout, testing::random_bytes(0x201, 1), region);
    FAIL();
  } catch (const PeError& e) {
    EXPECT_EQ(e.kind(), PeError::Kind::PayloadTooLarge);
  }
}

TEST(InjectSlack, EmptyPayloadIsIdentity) {
  auto bytes = make_fixture(two_sections());
  auto layout = parse(bytes);
  auto injected = inject_slack(layout, {}, find_slack(layout).front());
  EXPECT_EQ(serialize(injected.layout), bytes);
  EXPECT_EQ(injected.record.original_digest, injected.record.modified_digest);
}

TEST(InjectSlack, RecordDigests) {
  auto bytes = make_fixture(two_sections());
  auto layout = parse(bytes);
  auto injected = inject_slack(layout, testing::random_bytes(64, 5), find_slack(layout).front(), 16);
  auto out = serialize(injected.layout);
  EXPECT_EQ(injected.record.mode, InjectionMode::slack);
  EXPECT_EQ(injected.record.length, 64u);
  EXPECT_EQ(injected.record.original_digest, sha256_hex(bytes));
  EXPECT_EQ(injected.record.modified_digest, sha256_hex(out));
  EXPECT_EQ(injected.record.file_offset, find_slack(layout).front().file_offset + 16);
}

TEST(AppendSection, SizeRoundsToFileAlignment) {
  auto bytes = make_fixture(two_sections());
  auto layout = parse(bytes);
  auto payload = testing::random_bytes(999, 4);
  auto out = serialize(append_section(layout, payload).layout);

  auto raw = raw_sections(out);
  ASSERT_EQ(raw.size(), 3u);
  const std::uint32_t expected_raw = (999 + 0x1FF) / 0x200 * 0x200;
  ASSERT_EQ(expected_raw, 0x400u);
  EXPECT_EQ(raw[2].name, ".pay");
  EXPECT_EQ(raw[2].size_of_raw_data, expected_raw);
  EXPECT_EQ(raw[2].virtual_size, 999u);
  EXPECT_EQ(raw[2].pointer_to_raw_data % 0x200, 0u);
  EXPECT_EQ(raw[2].virtual_address % 0x1000, 0u);
  EXPECT_GE(raw[2].virtual_address, raw[1].virtual_address + raw[1].virtual_size);
  EXPECT_EQ(Bytes(out.begin() + raw[2].pointer_to_raw_data, out.begin() + raw[2].pointer_to_raw_data + 999), payload);
  for (int i = 0; i < 2; ++i) {
    EXPECT_EQ(raw[i].pointer_to_raw_data, layout.sections[i].header.pointer_to_raw_data);
    EXPECT_EQ(raw[i].size_of_raw_data, layout.sections[i].header.size_of_raw_data);
  }
  EXPECT_EQ(load_u32(out, parse(out).pe_offset + 24 + 56), parse(out).optional_header.size_of_image);
}

TEST(AppendSection, ReparsesWithOneMoreSection) {
  auto layout = parse(make_fixture(two_sections()));
  auto out = serialize(append_section(layout, testing::random_bytes(100, 1)).layout);
  auto again = parse(out);
  EXPECT_EQ(again.sections.size(), 3u);
  EXPECT_EQ(serialize(again), out);
  EXPECT_FALSE(check_layout(again).has_value());
}

TEST(AppendSection, OverlayPreservedBeforeNewSection) {
  auto spec = two_sections();
  spec.overlay = testing::random_bytes(77, 8);
  auto bytes = make_fixture(spec);
  auto out = serialize(append_section(parse(bytes), testing::random_bytes(10, 1)).layout);
  auto at = bytes.size() - 77;
  EXPECT_EQ(Bytes(out.begin() + at, out.begin() + at + 77), spec.overlay);
}

TEST(AppendSection, TightHeadersRefuse) {
  auto spec = two_sections();
  spec.tight_headers = true;
  auto layout = parse(make_fixture(spec));
  EXPECT_LT(layout.header_slack(), kSectionHeaderSize);
  try {
    append_section(layout, testing::random_bytes(10, 1));
    FAIL();
  } catch (const PeError& e) {
    EXPECT_EQ(e.kind(), PeError::Kind::NoHeaderSlack);
  }
}

TEST(Overlay, AppendsAtEnd) {
  auto bytes = make_fixture(two_sections());
  auto payload = testing::random_bytes(300, 3);
  auto out = append_overlay(bytes, payload);
  ASSERT_EQ(out.bytes.size(), bytes.size() + 300);
  EXPECT_TRUE(std::equal(bytes.begin(), bytes.end(), out.bytes.begin()));
  EXPECT_EQ(out.record.file_offset, bytes.size());
  auto layout = parse(out.bytes);
  EXPECT_EQ(layout.overlay, payload);
  EXPECT_EQ(append_overlay(bytes, {}).bytes, bytes);
}

TEST(Overlay, WorksOnNonPe) {
  Bytes raw{1, 2, 3};
  EXPECT_EQ(append_overlay(raw, Bytes{4, 5}).bytes, (Bytes{1, 2, 3, 4, 5}));
}

// Property: every injection leaves executable sections untouched and re-parses.
TEST(InjectionProperty, ExecutableBytesPreserved) {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    auto bytes = make_fixture(two_sections(0x200 * (1 + seed % 3)));
    auto layout = parse(bytes);
    auto exec = executable_section_bytes(layout);
    auto payload = testing::random_bytes(1 + seed * 13 % 0x200, seed);

    auto s = serialize(inject_slack(layout, payload, find_slack(layout).front()).layout);
    EXPECT_EQ(s.size(), bytes.size());
    EXPECT_EQ(executable_section_bytes(parse(s)), exec);

    auto n = serialize(append_section(layout, payload).layout);
    EXPECT_EQ(executable_section_bytes(parse(n)), exec);

    auto o = append_overlay(bytes, payload).bytes;
    EXPECT_EQ(executable_section_bytes(parse(o)), exec);
  }
}

TEST(InjectionProperty, SlackInCodeSectionLeavesMappedBytes) {
  FixtureSpec spec;
  spec.sections.push_back({".text", testing::random_bytes(0x300, 1), 0x200, true});
  auto bytes = make_fixture(spec);
  auto layout = parse(bytes);
  auto regions = find_slack(layout);
  ASSERT_EQ(regions.size(), 1u);
  auto out = inject_slack(layout, testing::random_bytes(0x200, 2), regions.front()).layout;
  EXPECT_NE(out.sections[0].data, layout.sections[0].data);
  ASSERT_EQ(executable_section_bytes(out).size(), 1u);
  EXPECT_EQ(executable_section_bytes(out)[0].size(), layout.sections[0].header.virtual_size);
  EXPECT_EQ(executable_section_bytes(out), executable_section_bytes(layout));
}

TEST(Fixture, RejectsBadAlignment) {
  auto spec = two_sections();
  spec.file_alignment = 0x300;
  EXPECT_THROW(make_fixture(spec), PeError);
  spec.file_alignment = 0x200;
  spec.section_alignment = 0x100;
  EXPECT_THROW(make_fixture(spec), PeError);
}

TEST(Fixture, DeterministicUnderSeed) {
  EXPECT_EQ(make_fixture(two_sections()), make_fixture(two_sections()));
  auto other = two_sections();
  other.seed = 8;
  EXPECT_NE(make_fixture(two_sections()), make_fixture(other));
}

TEST(Fixture, GoldenDigestWithCorpusBody) {
  corpus::CorpusSpec cs;
  cs.n_benign = 4;
  cs.n_malicious = 4;
  corpus::Generator gen(cs);
  auto body = gen.file(5);
  FixtureSpec spec;
  spec.seed = 1;
  spec.sections.push_back({".text", Bytes(body.begin(), body.begin() + 1024), 0, true});
  spec.sections.push_back({".data", Bytes(body.begin() + 1024, body.end()), 0x200, false});
  auto golden = testing::read_golden("digests.txt");
  EXPECT_EQ(sha256_hex(make_fixture(spec)), golden["fixture_corpus_body"]);
}

TEST(InjectionMode, StringRoundTrip) {
  for (auto m : {InjectionMode::slack, InjectionMode::new_section, InjectionMode::overlay}) {
    EXPECT_EQ(parse_injection_mode(to_string(m)), m);
  }
  EXPECT_THROW(parse_injection_mode("nope"), Error);
}

}  // namespace
}  // namespace pforge::pe
