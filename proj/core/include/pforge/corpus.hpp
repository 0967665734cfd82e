#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "pforge/bytes.hpp"
#include "pforge/rng.hpp"

namespace pforge::corpus {

class CorpusError : public Error {
 public:
  using Error::Error;
};

struct Range {
  std::size_t min = 0;
  std::size_t max = 0;
};

struct CorpusSpec {
  std::size_t n_benign = 1000;
  std::size_t n_malicious = 1000;
  std::size_t families = 5;
  Range length_range{2048, 65536};
  std::size_t motifs_per_family = 4;
  Range motif_len_range{64, 128};  // one to two windows at the desk window size
  Range plant_count_range{3, 10};
  /// Benign-only marker strings (UTF-16LE text, like version resources and
  /// manifests in real goodware). Zero disables them.
  std::size_t benign_markers = 8;
  Range marker_len_range{192, 384};
  bool wrap_pe = false;
  std::uint64_t seed = 1;
  /// Convolution window of the detector this corpus is for. Motifs are never
  /// planted in the first window, and lengths must cover four windows.
  std::size_t window = 64;

  /// Throws CorpusError on the first violated constraint.
  void validate() const;
};

enum class Label : int { benign = 0, malicious = 1 };

struct ManifestEntry {
  std::string path;  // relative to Manifest::root
  Label label = Label::benign;
  std::optional<std::size_t> family;
  std::size_t length = 0;
  std::string digest;  // sha256 of the file contents
};

struct Manifest {
  std::vector<ManifestEntry> entries;
  std::uint64_t seed = 0;
  std::string split = "all";
  std::filesystem::path root;

  std::filesystem::path resolve(const ManifestEntry& e) const { return root / e.path; }
  std::size_t count(Label label) const;
};

/// JSON-lines; one object per entry carrying path, label, family, length,
/// digest, seed and split.
void write_manifest(const Manifest& manifest, const std::filesystem::path& path);
Manifest read_manifest(const std::filesystem::path& path);

/// Re-hashes every entry's file; returns paths whose digest or length differ.
std::vector<std::string> verify_manifest(const Manifest& manifest);

/// Order-1 Markov byte source mimicking mixed text, code and zero padding.
class BackgroundModel {
 public:
  explicit BackgroundModel(std::uint64_t seed);
  Bytes sample(std::size_t length, Rng& rng) const;
  std::uint8_t next(std::uint8_t prev, Rng& rng) const;

 private:
  // Cumulative distributions, one row per previous byte.
  std::vector<std::array<double, 256>> cdf_;
};

/// Deterministic in-memory generator behind gen_corpus.
class Generator {
 public:
  explicit Generator(CorpusSpec spec);

  const CorpusSpec& spec() const { return spec_; }
  std::size_t size() const { return spec_.n_benign + spec_.n_malicious; }
  const std::vector<std::vector<Bytes>>& motifs() const { return motifs_; }
  const std::vector<Bytes>& markers() const { return markers_; }

  Label label_of(std::size_t index) const {
    return index < spec_.n_benign ? Label::benign : Label::malicious;
  }
  std::optional<std::size_t> family_of(std::size_t index) const;

  /// File contents for corpus index `index`; a pure function of (spec, index).
  Bytes file(std::size_t index) const;

  /// True when any family motif occurs in `data`.
  bool contains_motif(ByteView data) const;

 private:
  Bytes benign_body(std::size_t length, Rng& rng) const;
  void plant(Bytes& body, const Bytes& piece, Rng& rng) const;
  Bytes malicious_body(std::size_t length, std::size_t family, Rng& rng) const;
  Bytes wrap(Bytes body, Rng& rng) const;

  CorpusSpec spec_;
  BackgroundModel background_;
  std::vector<std::vector<Bytes>> motifs_;
  std::vector<Bytes> markers_;
};

/// Writes every file under out_dir/files plus out_dir/manifest.jsonl.
Manifest gen_corpus(const CorpusSpec& spec, const std::filesystem::path& out_dir, unsigned jobs = 1);

struct Splits {
  Manifest train;
  Manifest val;
  Manifest test;
};

/// Stratified, seed-deterministic three-way split.
Splits split(const Manifest& manifest, std::array<double, 3> ratios, std::uint64_t seed);

}  // namespace pforge::corpus
