#include "pforge/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <numeric>

#include <json.hpp>

#include "pforge/parallel.hpp"
#include "pforge/pe.hpp"

namespace pforge::corpus {
namespace {

using json = nlohmann::json;

constexpr std::uint64_t kMotifStream = 0x3071F;
constexpr std::uint64_t kMarkerStream = 0x6A7C;
constexpr std::uint64_t kBackgroundStream = 0xB6;
constexpr std::uint64_t kFileStreamBase = 1'000'000;
constexpr std::uint64_t kSplitStream = 0x5B117;
constexpr int kMaxResamples = 100;

enum Regime { kZero = 0, kText = 1, kCode = 2, kOther = 3 };

// Bytes common in x86 code: mov/push/call/jmp opcodes and frequent ModRM values.
constexpr std::uint8_t kCodeBytes[] = {0x8B, 0x89, 0xE8, 0xE9, 0xFF, 0x83, 0xC3, 0xCC, 0x85, 0x74, 0x75,
                                       0xEB, 0x50, 0x51, 0x53, 0x56, 0x57, 0x5D, 0x5E, 0x5F, 0xC7, 0x8D,
                                       0x45, 0x4D, 0x55, 0x24, 0x44, 0x08, 0x10, 0x18, 0x33, 0xC0};

// Rough English letter frequencies (a..z), percent.
constexpr double kLetterFreq[26] = {8.2, 1.5, 2.8, 4.3, 12.7, 2.2, 2.0, 6.1, 7.0, 0.2, 0.8, 4.0, 2.4,
                                    6.7, 7.5, 1.9, 0.1, 6.0, 6.3, 9.1, 2.8, 1.0, 2.4, 0.2, 2.0, 0.1};

bool is_text(std::uint8_t b) { return b == 0x09 || b == 0x0A || b == 0x0D || (b >= 0x20 && b <= 0x7E); }
bool is_zeroish(std::uint8_t b) { return b <= 0x0F || b == 0xFF; }

void check_range(const Range& r, const char* name) {
  if (r.min == 0 || r.max == 0) throw CorpusError(std::string(name) + " must be positive");
  if (r.min > r.max) throw CorpusError(std::string(name) + " has min > max");
}

std::string entry_name(std::size_t index, bool pe) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "files/%06zu.%s", index, pe ? "exe" : "bin");
  return buf;
}

}  // namespace

void CorpusSpec::validate() const {
  if (n_benign + n_malicious == 0) throw CorpusError("corpus must contain at least one file");
  if (families == 0) throw CorpusError("families must be > 0");
  if (motifs_per_family == 0) throw CorpusError("motifs_per_family must be > 0");
  if (window < 2) throw CorpusError("window must be >= 2");
  check_range(length_range, "length_range");
  check_range(motif_len_range, "motif_len_range");
  check_range(plant_count_range, "plant_count_range");
  if (benign_markers > 0) {
    check_range(marker_len_range, "marker_len_range");
    if (marker_len_range.min < 2) throw CorpusError("marker_len_range.min must be >= 2");
    if (marker_len_range.max + window > length_range.min) {
      throw CorpusError("markers do not fit after the first window of the shortest file");
    }
  }
  if (length_range.min < 4 * window) {
    throw CorpusError("length_range.min must cover at least four windows (" + std::to_string(4 * window) + " bytes)");
  }
  if (motif_len_range.max + window > length_range.min) {
    throw CorpusError("motifs do not fit after the first window of the shortest file");
  }
}

std::size_t Manifest::count(Label label) const {
  return static_cast<std::size_t>(
      std::count_if(entries.begin(), entries.end(), [&](const ManifestEntry& e) { return e.label == label; }));
}

void write_manifest(const Manifest& manifest, const std::filesystem::path& path) {
  std::string text;
  for (const auto& e : manifest.entries) {
    json j;
    j["path"] = e.path;
    j["label"] = static_cast<int>(e.label);
    j["family"] = e.family ? json(*e.family) : json(nullptr);
    j["length"] = e.length;
    j["digest"] = e.digest;
    j["seed"] = manifest.seed;
    j["split"] = manifest.split;
    text += j.dump();
    text += '\n';
  }
  write_file(path, ByteView(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

Manifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  Manifest m;
  m.root = path.parent_path();
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = json::parse(line);
      ManifestEntry e;
      e.path = j.at("path").get<std::string>();
      const int label = j.at("label").get<int>();
      if (label != 0 && label != 1) throw CorpusError("label must be 0 or 1");
      e.label = static_cast<Label>(label);
      if (!j.at("family").is_null()) e.family = j.at("family").get<std::size_t>();
      e.length = j.at("length").get<std::size_t>();
      e.digest = j.at("digest").get<std::string>();
      m.seed = j.value("seed", std::uint64_t{0});
      m.split = j.value("split", std::string("all"));
      m.entries.push_back(std::move(e));
    } catch (const json::exception& ex) {
      throw CorpusError(path.string() + ":" + std::to_string(lineno) + ": " + ex.what());
    } catch (const CorpusError& ex) {
      throw CorpusError(path.string() + ":" + std::to_string(lineno) + ": " + ex.what());
    }
  }
  return m;
}

std::vector<std::string> verify_manifest(const Manifest& manifest) {
  std::vector<std::string> bad;
  for (const auto& e : manifest.entries) {
    const auto bytes = read_file(manifest.resolve(e));
    if (bytes.size() != e.length || sha256_hex(bytes) != e.digest) bad.push_back(e.path);
  }
  return bad;
}

BackgroundModel::BackgroundModel(std::uint64_t seed) : cdf_(256) {
  Rng rng(mix_seed(seed, kBackgroundStream));

  std::array<std::array<double, 256>, 3> regime{};
  regime[kZero][0x00] = 40.0;
  regime[kZero][0xFF] = 3.0;
  for (int b = 0x01; b <= 0x0F; ++b) regime[kZero][b] = rng.uniform(0.2, 1.0);

  regime[kText][' '] = 15.0;
  regime[kText]['\n'] = 2.0;
  regime[kText]['\r'] = 1.0;
  regime[kText]['\t'] = 0.5;
  for (int i = 0; i < 26; ++i) {
    regime[kText]['a' + i] = kLetterFreq[i];
    regime[kText]['A' + i] = kLetterFreq[i] * 0.1;
  }
  for (int d = '0'; d <= '9'; ++d) regime[kText][d] = 1.5;
  for (int b = 0x21; b <= 0x7E; ++b) {
    if (regime[kText][b] == 0.0) regime[kText][b] = 0.3;
  }

  for (auto b : kCodeBytes) regime[kCode][b] = rng.uniform(0.5, 2.0);
  for (int i = 0; i < 16; ++i) regime[kCode][0x80 + rng.below(0x60)] += rng.uniform(0.3, 1.0);

  for (auto& r : regime) {
    const double total = std::accumulate(r.begin(), r.end(), 0.0);
    for (auto& w : r) w /= total;
  }

  static constexpr double kMix[4][3] = {
      {0.75, 0.08, 0.17},  // after zero-ish bytes
      {0.04, 0.88, 0.08},  // after text
      {0.15, 0.05, 0.80},  // after code
      {0.30, 0.30, 0.40},
  };
  std::array<bool, 256> code_member{};
  for (int b = 0; b < 256; ++b) code_member[b] = regime[kCode][b] > 0.0;

  for (int prev = 0; prev < 256; ++prev) {
    const auto p = static_cast<std::uint8_t>(prev);
    const int cat = is_zeroish(p) ? kZero : is_text(p) ? kText : code_member[prev] ? kCode : kOther;
    std::array<double, 256> w{};
    for (int r = 0; r < 3; ++r) {
      for (int b = 0; b < 256; ++b) {
        if (regime[r][b] > 0.0) w[b] += kMix[cat][r] * regime[r][b] * rng.uniform(0.6, 1.4);
      }
    }
    const double total = std::accumulate(w.begin(), w.end(), 0.0);
    double acc = 0.0;
    for (int b = 0; b < 256; ++b) {
      acc += w[b] / total;
      cdf_[prev][b] = acc;
    }
    cdf_[prev][255] = 1.0;
  }
}

std::uint8_t BackgroundModel::next(std::uint8_t prev, Rng& rng) const {
  const auto& row = cdf_[prev];
  const double u = rng.uniform();
  auto it = std::upper_bound(row.begin(), row.end(), u);
  if (it == row.end()) --it;
  return static_cast<std::uint8_t>(it - row.begin());
}

Bytes BackgroundModel::sample(std::size_t length, Rng& rng) const {
  Bytes out(length);
  std::uint8_t prev = 0;
  for (auto& b : out) prev = b = next(prev, rng);
  return out;
}

Generator::Generator(CorpusSpec spec) : spec_(std::move(spec)), background_(spec_.seed) {
  spec_.validate();
  Rng rng(mix_seed(spec_.seed, kMotifStream));
  motifs_.resize(spec_.families);
  for (auto& family : motifs_) {
    family.resize(spec_.motifs_per_family);
    for (auto& motif : family) {
      motif.resize(rng.between(spec_.motif_len_range.min, spec_.motif_len_range.max));
      for (auto& b : motif) b = rng.byte();
    }
  }

  // Capitalised words separated by spaces, stored as UTF-16LE.
  Rng mrng(mix_seed(spec_.seed, kMarkerStream));
  markers_.resize(spec_.benign_markers);
  for (auto& marker : markers_) {
    const std::size_t chars = mrng.between(spec_.marker_len_range.min, spec_.marker_len_range.max) / 2;
    std::size_t word_left = mrng.between(3, 9);
    bool word_start = true;
    for (std::size_t i = 0; i < chars; ++i) {
      char ch = ' ';
      if (word_left == 0) {
        word_left = mrng.between(3, 9);
        word_start = true;
      } else {
        ch = static_cast<char>((word_start ? 'A' : 'a') + mrng.below(26));
        word_start = false;
        --word_left;
      }
      marker.push_back(static_cast<std::uint8_t>(ch));
      marker.push_back(0x00);
    }
  }
}

std::optional<std::size_t> Generator::family_of(std::size_t index) const {
  if (label_of(index) == Label::benign) return std::nullopt;
  return (index - spec_.n_benign) % spec_.families;
}

bool Generator::contains_motif(ByteView data) const {
  for (const auto& family : motifs_) {
    for (const auto& motif : family) {
      const std::boyer_moore_horspool_searcher searcher(motif.begin(), motif.end());
      if (std::search(data.begin(), data.end(), searcher) != data.end()) return true;
    }
  }
  return false;
}

void Generator::plant(Bytes& body, const Bytes& piece, Rng& rng) const {
  const std::size_t pos = rng.between(spec_.window, body.size() - piece.size());
  std::copy(piece.begin(), piece.end(), body.begin() + static_cast<std::ptrdiff_t>(pos));
}

Bytes Generator::benign_body(std::size_t length, Rng& rng) const {
  Bytes body = background_.sample(length, rng);
  if (markers_.empty()) return body;
  const std::size_t plants = rng.between(spec_.plant_count_range.min, spec_.plant_count_range.max);
  for (std::size_t i = 0; i < plants; ++i) plant(body, markers_[rng.below(markers_.size())], rng);
  return body;
}

Bytes Generator::malicious_body(std::size_t length, std::size_t family, Rng& rng) const {
  Bytes body = background_.sample(length, rng);
  const auto& motifs = motifs_[family];
  const std::size_t plants = rng.between(spec_.plant_count_range.min, spec_.plant_count_range.max);
  for (std::size_t i = 0; i < plants; ++i) plant(body, motifs[rng.below(motifs.size())], rng);
  return body;
}

Bytes Generator::wrap(Bytes body, Rng& rng) const {
  if (!spec_.wrap_pe) return body;
  pe::FixtureSpec fs;
  fs.seed = rng.next();
  const std::size_t half = body.size() / 2;
  pe::FixtureSection text{".text", Bytes(body.begin(), body.begin() + static_cast<std::ptrdiff_t>(half)), 0, true};
  pe::FixtureSection data{".data", Bytes(body.begin() + static_cast<std::ptrdiff_t>(half), body.end()),
                          static_cast<std::uint32_t>(align_up(2 * spec_.window, fs.file_alignment)), false};
  fs.sections = {std::move(text), std::move(data)};
  return pe::make_fixture(fs);
}

Bytes Generator::file(std::size_t index) const {
  if (index >= size()) throw CorpusError("corpus index out of range");
  Rng rng(mix_seed(spec_.seed, kFileStreamBase + index));
  const auto label = label_of(index);
  for (int attempt = 0; attempt < kMaxResamples; ++attempt) {
    const std::size_t length = rng.between(spec_.length_range.min, spec_.length_range.max);
    Bytes out = label == Label::benign ? benign_body(length, rng) : malicious_body(length, *family_of(index), rng);
    out = wrap(std::move(out), rng);
    // Benign files must be motif-free; malicious ones must keep at least one
    // intact motif (wrapping can split one across sections).
    if (contains_motif(out) == (label == Label::malicious)) return out;
  }
  throw CorpusError("could not generate a label-sound file for index " + std::to_string(index) + " after " +
                    std::to_string(kMaxResamples) + " attempts");
}

Manifest gen_corpus(const CorpusSpec& spec, const std::filesystem::path& out_dir, unsigned jobs) {
  Generator gen(spec);
  std::filesystem::create_directories(out_dir / "files");

  Manifest m;
  m.seed = spec.seed;
  m.root = out_dir;
  m.entries.resize(gen.size());
  parallel_for(gen.size(), jobs, [&](std::size_t i) {
    const Bytes bytes = gen.file(i);
    auto& e = m.entries[i];
    e.path = entry_name(i, spec.wrap_pe);
    e.label = gen.label_of(i);
    e.family = gen.family_of(i);
    e.length = bytes.size();
    e.digest = sha256_hex(bytes);
    write_file(out_dir / e.path, bytes);
  });
  write_manifest(m, out_dir / "manifest.jsonl");
  return m;
}

Splits split(const Manifest& manifest, std::array<double, 3> ratios, std::uint64_t seed) {
  const double sum = ratios[0] + ratios[1] + ratios[2];
  if (std::any_of(ratios.begin(), ratios.end(), [](double r) { return !(r >= 0.0); }) || std::abs(sum - 1.0) > 1e-9) {
    throw CorpusError("split ratios must be non-negative and sum to 1");
  }
  Rng rng(mix_seed(seed, kSplitStream));

  // Shuffle each class, then interleave by within-class quantile so every
  // prefix of the merged order carries the global class proportions.
  struct Slot {
    double key;
    int label;
    std::size_t rank;
    std::size_t index;
  };
  std::vector<Slot> order;
  for (int label = 0; label <= 1; ++label) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < manifest.entries.size(); ++i) {
      if (static_cast<int>(manifest.entries[i].label) == label) idx.push_back(i);
    }
    rng.shuffle(idx.begin(), idx.end());
    for (std::size_t r = 0; r < idx.size(); ++r) {
      order.push_back({(static_cast<double>(r) + 0.5) / static_cast<double>(idx.size()), label, r, idx[r]});
    }
  }
  std::sort(order.begin(), order.end(), [](const Slot& a, const Slot& b) {
    if (a.key != b.key) return a.key < b.key;
    return a.label < b.label;
  });

  const auto n = static_cast<double>(order.size());
  const auto cut1 = static_cast<std::size_t>(std::llround(ratios[0] * n));
  const auto cut2 = std::min(order.size(), static_cast<std::size_t>(std::llround((ratios[0] + ratios[1]) * n)));

  Splits out;
  Manifest* targets[3] = {&out.train, &out.val, &out.test};
  const char* names[3] = {"train", "val", "test"};
  for (int s = 0; s < 3; ++s) {
    targets[s]->seed = manifest.seed;
    targets[s]->root = manifest.root;
    targets[s]->split = names[s];
  }
  for (std::size_t i = 0; i < order.size(); ++i) {
    Manifest* t = i < cut1 ? &out.train : i < cut2 ? &out.val : &out.test;
    t->entries.push_back(manifest.entries[order[i].index]);
  }
  return out;
}

}  // namespace pforge::corpus
