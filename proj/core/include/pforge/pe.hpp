#pragma once

// Minimal PE32/PE32+ model: enough structure to locate section slack, append
// a section, and write the file back byte-exact. Import/export tables,
// relocations and the checksum are not interpreted.

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "pforge/bytes.hpp"

namespace pforge::pe {

inline constexpr std::uint32_t kScnCntCode = 0x00000020;
inline constexpr std::uint32_t kScnCntInitializedData = 0x00000040;
inline constexpr std::uint32_t kScnMemExecute = 0x20000000;
inline constexpr std::uint32_t kScnMemRead = 0x40000000;
inline constexpr std::uint32_t kScnMemWrite = 0x80000000;

inline constexpr std::size_t kSectionHeaderSize = 40;
inline constexpr std::size_t kCoffHeaderSize = 20;

class PeError : public Error {
 public:
  enum class Kind { NotPe, Truncated, Malformed, PayloadTooLarge, NoHeaderSlack, InvalidSpec };
  PeError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

struct CoffHeader {
  std::uint16_t machine = 0;
  std::uint16_t number_of_sections = 0;
  std::uint32_t time_date_stamp = 0;
  std::uint32_t pointer_to_symbol_table = 0;
  std::uint32_t number_of_symbols = 0;
  std::uint16_t size_of_optional_header = 0;
  std::uint16_t characteristics = 0;
};

/// The optional header fields the injector touches; everything else lives in
/// `raw` and is written back verbatim.
struct OptionalHeader {
  std::uint16_t magic = 0;  // 0x10b PE32, 0x20b PE32+
  std::uint32_t section_alignment = 0;
  std::uint32_t file_alignment = 0;
  std::uint32_t size_of_image = 0;
  std::uint32_t size_of_headers = 0;
  Bytes raw;
};

struct SectionHeader {
  std::array<std::uint8_t, 8> name{};
  std::uint32_t virtual_size = 0;
  std::uint32_t virtual_address = 0;
  std::uint32_t size_of_raw_data = 0;
  std::uint32_t pointer_to_raw_data = 0;
  std::uint32_t pointer_to_relocations = 0;
  std::uint32_t pointer_to_linenumbers = 0;
  std::uint16_t number_of_relocations = 0;
  std::uint16_t number_of_linenumbers = 0;
  std::uint32_t characteristics = 0;

  std::string name_string() const;
  bool executable() const { return (characteristics & kScnMemExecute) != 0; }
  std::uint32_t slack() const {
    return size_of_raw_data > virtual_size ? size_of_raw_data - virtual_size : 0;
  }
};

struct Section {
  SectionHeader header;
  Bytes gap_before;  // bytes between the previous raw range and this one
  Bytes data;        // exactly size_of_raw_data bytes (empty when unbacked)
};

struct PeLayout {
  Bytes dos_stub;  // [0, e_lfanew), including the MZ header
  std::uint32_t pe_offset = 0;
  CoffHeader coff;
  OptionalHeader optional_header;
  std::vector<Section> sections;
  Bytes header_padding;  // end of section table up to the first raw range
  Bytes overlay;         // bytes after the last raw range

  std::size_t section_table_offset() const {
    return pe_offset + 4 + kCoffHeaderSize + optional_header.raw.size();
  }
  std::size_t section_table_end() const {
    return section_table_offset() + sections.size() * kSectionHeaderSize;
  }
  /// Serialized file size.
  std::size_t file_size() const;
  /// Bytes available for new section headers before the first raw data.
  std::size_t header_slack() const;
};

struct SlackRegion {
  std::size_t section_index = 0;
  std::size_t file_offset = 0;
  std::size_t length = 0;
};

enum class InjectionMode { slack, new_section, overlay };

std::string to_string(InjectionMode mode);
InjectionMode parse_injection_mode(std::string_view text);

struct InjectionRecord {
  InjectionMode mode = InjectionMode::overlay;
  std::size_t file_offset = 0;
  std::size_t length = 0;
  std::string original_digest;
  std::string modified_digest;
};

PeLayout parse(ByteView bytes);
Bytes serialize(const PeLayout& layout);

/// True when `bytes` carries the MZ / PE\0\0 magics (does not validate further).
bool looks_like_pe(ByteView bytes);

/// One region per section whose raw size exceeds its virtual size, largest first.
std::vector<SlackRegion> find_slack(const PeLayout& layout);

struct Injected {
  PeLayout layout;
  InjectionRecord record;
};

Injected inject_slack(const PeLayout& layout, ByteView payload, const SlackRegion& region,
                      std::size_t offset_in_region = 0);

Injected append_section(const PeLayout& layout, ByteView payload,
                        std::string_view name = ".pay");

struct InjectedBytes {
  Bytes bytes;
  InjectionRecord record;
};

InjectedBytes append_overlay(ByteView file, ByteView payload);

/// The loader-visible bytes (the first min(virtual_size, size_of_raw_data)
/// raw bytes) of every MEM_EXECUTE section, in table order.
std::vector<Bytes> executable_section_bytes(const PeLayout& layout);

/// Checks the structural invariants this module guarantees for its own outputs:
/// aligned raw pointers/sizes and ascending, non-overlapping raw ranges.
/// Returns a description of the first violation, or nullopt.
std::optional<std::string> check_layout(const PeLayout& layout);

struct FixtureSection {
  std::string name;
  Bytes body;               // zero-padded up to the virtual size
  std::uint32_t slack = 0;  // bytes of raw data past the virtual size
  bool executable = false;
};

struct FixtureSpec {
  std::vector<FixtureSection> sections;
  std::uint32_t file_alignment = 0x200;
  std::uint32_t section_alignment = 0x1000;
  /// Spare bytes after the section table (rounded up with the headers).
  std::uint32_t header_room = 0x80;
  /// Place the section table so it ends exactly on a file-alignment boundary,
  /// leaving no room for another header.
  bool tight_headers = false;
  Bytes overlay;
  std::uint64_t seed = 0;  // fills the DOS stub program area
};

Bytes make_fixture(const FixtureSpec& spec);

}  // namespace pforge::pe
