#include "pforge/pe.hpp"

#include <algorithm>
#include <cstring>

#include "pforge/rng.hpp"

namespace pforge::pe {
namespace {

constexpr std::uint16_t kMagicPe32 = 0x10b;
constexpr std::uint16_t kMagicPe32Plus = 0x20b;
constexpr std::size_t kDosHeaderSize = 0x40;
constexpr std::size_t kLfanewOffset = 0x3C;

// Optional-header field offsets; identical for PE32 and PE32+.
constexpr std::size_t kOptSectionAlignment = 32;
constexpr std::size_t kOptFileAlignment = 36;
constexpr std::size_t kOptSizeOfImage = 56;
constexpr std::size_t kOptSizeOfHeaders = 60;
constexpr std::size_t kOptMinSize = 64;

[[noreturn]] void fail(PeError::Kind kind, const std::string& msg) { throw PeError(kind, msg); }

bool has_raw(const SectionHeader& h) { return h.size_of_raw_data > 0; }

SectionHeader read_section_header(ByteView b, std::size_t off) {
  SectionHeader h;
  std::memcpy(h.name.data(), b.data() + off, 8);
  h.virtual_size = load_u32(b, off + 8);
  h.virtual_address = load_u32(b, off + 12);
  h.size_of_raw_data = load_u32(b, off + 16);
  h.pointer_to_raw_data = load_u32(b, off + 20);
  h.pointer_to_relocations = load_u32(b, off + 24);
  h.pointer_to_linenumbers = load_u32(b, off + 28);
  h.number_of_relocations = load_u16(b, off + 32);
  h.number_of_linenumbers = load_u16(b, off + 34);
  h.characteristics = load_u32(b, off + 36);
  return h;
}

void write_section_header(Bytes& out, const SectionHeader& h) {
  const std::size_t off = out.size();
  out.resize(off + kSectionHeaderSize);
  std::span<std::uint8_t> b(out);
  std::memcpy(b.data() + off, h.name.data(), 8);
  store_u32(b, off + 8, h.virtual_size);
  store_u32(b, off + 12, h.virtual_address);
  store_u32(b, off + 16, h.size_of_raw_data);
  store_u32(b, off + 20, h.pointer_to_raw_data);
  store_u32(b, off + 24, h.pointer_to_relocations);
  store_u32(b, off + 28, h.pointer_to_linenumbers);
  store_u16(b, off + 32, h.number_of_relocations);
  store_u16(b, off + 34, h.number_of_linenumbers);
  store_u32(b, off + 36, h.characteristics);
}

std::size_t first_raw_offset(const PeLayout& layout) {
  for (const auto& s : layout.sections) {
    if (has_raw(s.header)) return s.header.pointer_to_raw_data;
  }
  return layout.section_table_end() + layout.header_padding.size();
}

std::array<std::uint8_t, 8> section_name(std::string_view name) {
  if (name.size() > 8) fail(PeError::Kind::InvalidSpec, "section name longer than 8 bytes");
  std::array<std::uint8_t, 8> out{};
  std::memcpy(out.data(), name.data(), name.size());
  return out;
}

}  // namespace

std::string SectionHeader::name_string() const {
  auto end = std::find(name.begin(), name.end(), std::uint8_t{0});
  return std::string(name.begin(), end);
}

std::string to_string(InjectionMode mode) {
  switch (mode) {
    case InjectionMode::slack:
      return "slack";
    case InjectionMode::new_section:
      return "section";
    case InjectionMode::overlay:
      return "overlay";
  }
  return "unknown";
}

InjectionMode parse_injection_mode(std::string_view text) {
  if (text == "slack") return InjectionMode::slack;
  if (text == "section" || text == "new_section") return InjectionMode::new_section;
  if (text == "overlay") return InjectionMode::overlay;
  throw Error("unknown injection mode '" + std::string(text) + "'");
}

std::size_t PeLayout::file_size() const {
  std::size_t n = section_table_end() + header_padding.size();
  for (const auto& s : sections) n += s.gap_before.size() + s.data.size();
  return n + overlay.size();
}

std::size_t PeLayout::header_slack() const {
  const std::size_t table_end = section_table_end();
  const std::size_t limit = std::min<std::size_t>(optional_header.size_of_headers, first_raw_offset(*this));
  return limit > table_end ? limit - table_end : 0;
}

bool looks_like_pe(ByteView bytes) {
  if (bytes.size() < kDosHeaderSize || bytes[0] != 'M' || bytes[1] != 'Z') return false;
  const std::size_t off = load_u32(bytes, kLfanewOffset);
  return off + 4 <= bytes.size() && bytes[off] == 'P' && bytes[off + 1] == 'E' && bytes[off + 2] == 0 &&
         bytes[off + 3] == 0;
}

PeLayout parse(ByteView bytes) {
  if (bytes.size() < kDosHeaderSize) fail(PeError::Kind::NotPe, "file shorter than a DOS header");
  if (bytes[0] != 'M' || bytes[1] != 'Z') fail(PeError::Kind::NotPe, "missing MZ signature");
  const std::size_t pe_off = load_u32(bytes, kLfanewOffset);
  if (pe_off + 4 > bytes.size()) fail(PeError::Kind::NotPe, "e_lfanew points outside the file");
  if (!looks_like_pe(bytes)) fail(PeError::Kind::NotPe, "missing PE signature");
  if (pe_off < kDosHeaderSize) fail(PeError::Kind::Malformed, "PE header overlaps the DOS header");

  PeLayout layout;
  layout.pe_offset = static_cast<std::uint32_t>(pe_off);
  layout.dos_stub.assign(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(pe_off));

  const std::size_t coff_off = pe_off + 4;
  if (coff_off + kCoffHeaderSize > bytes.size()) fail(PeError::Kind::Truncated, "COFF header truncated");
  auto& coff = layout.coff;
  coff.machine = load_u16(bytes, coff_off);
  coff.number_of_sections = load_u16(bytes, coff_off + 2);
  coff.time_date_stamp = load_u32(bytes, coff_off + 4);
  coff.pointer_to_symbol_table = load_u32(bytes, coff_off + 8);
  coff.number_of_symbols = load_u32(bytes, coff_off + 12);
  coff.size_of_optional_header = load_u16(bytes, coff_off + 16);
  coff.characteristics = load_u16(bytes, coff_off + 18);

  const std::size_t opt_off = coff_off + kCoffHeaderSize;
  const std::size_t opt_size = coff.size_of_optional_header;
  if (opt_off + opt_size > bytes.size()) fail(PeError::Kind::Truncated, "optional header truncated");
  if (opt_size < kOptMinSize) fail(PeError::Kind::Malformed, "optional header too small");
  auto& opt = layout.optional_header;
  opt.raw.assign(bytes.begin() + static_cast<std::ptrdiff_t>(opt_off),
                 bytes.begin() + static_cast<std::ptrdiff_t>(opt_off + opt_size));
  opt.magic = load_u16(opt.raw, 0);
  if (opt.magic != kMagicPe32 && opt.magic != kMagicPe32Plus) {
    fail(PeError::Kind::Malformed, "unknown optional header magic");
  }
  opt.section_alignment = load_u32(opt.raw, kOptSectionAlignment);
  opt.file_alignment = load_u32(opt.raw, kOptFileAlignment);
  opt.size_of_image = load_u32(opt.raw, kOptSizeOfImage);
  opt.size_of_headers = load_u32(opt.raw, kOptSizeOfHeaders);

  const std::size_t table_off = opt_off + opt_size;
  const std::size_t table_end = table_off + std::size_t{coff.number_of_sections} * kSectionHeaderSize;
  if (table_end > bytes.size()) fail(PeError::Kind::Truncated, "section table truncated");

  layout.sections.resize(coff.number_of_sections);
  for (std::size_t i = 0; i < layout.sections.size(); ++i) {
    layout.sections[i].header = read_section_header(bytes, table_off + i * kSectionHeaderSize);
  }

  std::size_t cursor = table_end;
  bool seen_raw = false;
  for (std::size_t i = 0; i < layout.sections.size(); ++i) {
    auto& s = layout.sections[i];
    if (!has_raw(s.header)) continue;
    const std::size_t begin = s.header.pointer_to_raw_data;
    const std::size_t end = begin + s.header.size_of_raw_data;
    if (end > bytes.size()) {
      fail(PeError::Kind::Truncated, "raw data of section " + std::to_string(i) + " extends past end of file");
    }
    if (begin < cursor) {
      fail(PeError::Kind::Malformed, "raw data of section " + std::to_string(i) + " overlaps preceding data");
    }
    auto gap_first = bytes.begin() + static_cast<std::ptrdiff_t>(cursor);
    auto gap_last = bytes.begin() + static_cast<std::ptrdiff_t>(begin);
    if (!seen_raw) {
      layout.header_padding.assign(gap_first, gap_last);
    } else {
      s.gap_before.assign(gap_first, gap_last);
    }
    s.data.assign(gap_last, bytes.begin() + static_cast<std::ptrdiff_t>(end));
    cursor = end;
    seen_raw = true;
  }
  // Without any raw-backed section everything past the table counts as padding.
  if (!seen_raw) {
    layout.header_padding.assign(bytes.begin() + static_cast<std::ptrdiff_t>(table_end), bytes.end());
  } else {
    layout.overlay.assign(bytes.begin() + static_cast<std::ptrdiff_t>(cursor), bytes.end());
  }
  return layout;
}

Bytes serialize(const PeLayout& layout) {
  if (layout.coff.number_of_sections != layout.sections.size()) {
    fail(PeError::Kind::Malformed, "number_of_sections does not match the section list");
  }
  if (layout.dos_stub.size() != layout.pe_offset) fail(PeError::Kind::Malformed, "DOS stub size != e_lfanew");
  Bytes out;
  out.reserve(layout.file_size());
  out.insert(out.end(), layout.dos_stub.begin(), layout.dos_stub.end());
  out.insert(out.end(), {'P', 'E', 0, 0});

  const std::size_t coff_off = out.size();
  out.resize(coff_off + kCoffHeaderSize);
  std::span<std::uint8_t> b(out);
  const auto& coff = layout.coff;
  store_u16(b, coff_off, coff.machine);
  store_u16(b, coff_off + 2, coff.number_of_sections);
  store_u32(b, coff_off + 4, coff.time_date_stamp);
  store_u32(b, coff_off + 8, coff.pointer_to_symbol_table);
  store_u32(b, coff_off + 12, coff.number_of_symbols);
  store_u16(b, coff_off + 16, static_cast<std::uint16_t>(layout.optional_header.raw.size()));
  store_u16(b, coff_off + 18, coff.characteristics);

  Bytes opt = layout.optional_header.raw;
  std::span<std::uint8_t> ob(opt);
  store_u16(ob, 0, layout.optional_header.magic);
  store_u32(ob, kOptSectionAlignment, layout.optional_header.section_alignment);
  store_u32(ob, kOptFileAlignment, layout.optional_header.file_alignment);
  store_u32(ob, kOptSizeOfImage, layout.optional_header.size_of_image);
  store_u32(ob, kOptSizeOfHeaders, layout.optional_header.size_of_headers);
  out.insert(out.end(), opt.begin(), opt.end());

  for (const auto& s : layout.sections) write_section_header(out, s.header);
  out.insert(out.end(), layout.header_padding.begin(), layout.header_padding.end());
  for (const auto& s : layout.sections) {
    if (!has_raw(s.header)) continue;
    out.insert(out.end(), s.gap_before.begin(), s.gap_before.end());
    if (out.size() != s.header.pointer_to_raw_data || s.data.size() != s.header.size_of_raw_data) {
      fail(PeError::Kind::Malformed, "section raw data does not match its header");
    }
    out.insert(out.end(), s.data.begin(), s.data.end());
  }
  out.insert(out.end(), layout.overlay.begin(), layout.overlay.end());
  return out;
}

std::vector<SlackRegion> find_slack(const PeLayout& layout) {
  std::vector<SlackRegion> regions;
  for (std::size_t i = 0; i < layout.sections.size(); ++i) {
    const auto& h = layout.sections[i].header;
    if (h.size_of_raw_data <= h.virtual_size) continue;
    regions.push_back({i, std::size_t{h.pointer_to_raw_data} + h.virtual_size, h.slack()});
  }
  std::stable_sort(regions.begin(), regions.end(),
                   [](const SlackRegion& a, const SlackRegion& b) { return a.length > b.length; });
  return regions;
}

Injected inject_slack(const PeLayout& layout, ByteView payload, const SlackRegion& region,
                      std::size_t offset_in_region) {
  if (region.section_index >= layout.sections.size()) {
    fail(PeError::Kind::InvalidSpec, "slack region refers to a missing section");
  }
  const auto& h = layout.sections[region.section_index].header;
  const std::size_t slack_begin = std::size_t{h.pointer_to_raw_data} + h.virtual_size;
  if (region.file_offset < slack_begin || region.file_offset + region.length > h.pointer_to_raw_data + std::size_t{h.size_of_raw_data}) {
    fail(PeError::Kind::InvalidSpec, "slack region lies outside the section's unused raw bytes");
  }
  if (offset_in_region > region.length || payload.size() > region.length - offset_in_region) {
    fail(PeError::Kind::PayloadTooLarge, "payload of " + std::to_string(payload.size()) +
                                             " bytes does not fit slack region of " +
                                             std::to_string(region.length - std::min(offset_in_region, region.length)) + " bytes");
  }
  Injected out{layout, {}};
  auto& data = out.layout.sections[region.section_index].data;
  const std::size_t at = region.file_offset + offset_in_region - h.pointer_to_raw_data;
  std::copy(payload.begin(), payload.end(), data.begin() + static_cast<std::ptrdiff_t>(at));

  out.record.mode = InjectionMode::slack;
  out.record.file_offset = region.file_offset + offset_in_region;
  out.record.length = payload.size();
  out.record.original_digest = sha256_hex(serialize(layout));
  out.record.modified_digest = sha256_hex(serialize(out.layout));
  return out;
}

Injected append_section(const PeLayout& layout, ByteView payload, std::string_view name) {
  if (layout.header_slack() < kSectionHeaderSize) {
    fail(PeError::Kind::NoHeaderSlack, "no room for another section header (" +
                                           std::to_string(layout.header_slack()) + " spare bytes)");
  }
  const auto& opt = layout.optional_header;
  Injected out{layout, {}};
  PeLayout& nl = out.layout;

  // The new header takes the first 40 bytes of the padding; everything after
  // the table keeps its file offset.
  nl.header_padding.erase(nl.header_padding.begin(),
                          nl.header_padding.begin() + static_cast<std::ptrdiff_t>(kSectionHeaderSize));

  std::uint64_t image_end = align_up(opt.size_of_headers, opt.section_alignment);
  for (const auto& s : layout.sections) {
    const std::uint64_t extent = std::max(s.header.virtual_size, s.header.size_of_raw_data);
    image_end = std::max(image_end, align_up(std::uint64_t{s.header.virtual_address} + extent, opt.section_alignment));
  }

  Section sec;
  sec.header.name = section_name(name);
  sec.header.virtual_size = static_cast<std::uint32_t>(payload.size());
  sec.header.virtual_address = static_cast<std::uint32_t>(image_end);
  sec.header.characteristics = kScnCntInitializedData | kScnMemRead;
  if (!payload.empty()) {
    const std::size_t file_end = layout.file_size();
    const std::size_t ptr = align_up(file_end, opt.file_alignment);
    sec.gap_before = nl.overlay;
    sec.gap_before.resize(sec.gap_before.size() + (ptr - file_end), 0);
    nl.overlay.clear();
    sec.header.pointer_to_raw_data = static_cast<std::uint32_t>(ptr);
    sec.header.size_of_raw_data = static_cast<std::uint32_t>(align_up(payload.size(), opt.file_alignment));
    sec.data.assign(payload.begin(), payload.end());
    sec.data.resize(sec.header.size_of_raw_data, 0);
  }
  nl.sections.push_back(std::move(sec));
  nl.coff.number_of_sections = static_cast<std::uint16_t>(nl.sections.size());
  const auto& added = nl.sections.back().header;
  nl.optional_header.size_of_image = static_cast<std::uint32_t>(
      align_up(std::uint64_t{added.virtual_address} + added.virtual_size, opt.section_alignment));

  out.record.mode = InjectionMode::new_section;
  out.record.file_offset = added.pointer_to_raw_data;
  out.record.length = payload.size();
  out.record.original_digest = sha256_hex(serialize(layout));
  out.record.modified_digest = sha256_hex(serialize(nl));
  return out;
}

InjectedBytes append_overlay(ByteView file, ByteView payload) {
  InjectedBytes out;
  out.bytes.reserve(file.size() + payload.size());
  out.bytes.assign(file.begin(), file.end());
  out.bytes.insert(out.bytes.end(), payload.begin(), payload.end());
  out.record.mode = InjectionMode::overlay;
  out.record.file_offset = file.size();
  out.record.length = payload.size();
  out.record.original_digest = sha256_hex(file);
  out.record.modified_digest = sha256_hex(out.bytes);
  return out;
}

std::vector<Bytes> executable_section_bytes(const PeLayout& layout) {
  std::vector<Bytes> out;
  for (const auto& s : layout.sections) {
    if (!s.header.executable()) continue;
    const std::size_t mapped = std::min<std::size_t>(s.header.virtual_size, s.data.size());
    out.emplace_back(s.data.begin(), s.data.begin() + static_cast<std::ptrdiff_t>(mapped));
  }
  return out;
}

std::optional<std::string> check_layout(const PeLayout& layout) {
  const std::uint32_t fa = layout.optional_header.file_alignment;
  std::size_t cursor = layout.section_table_end();
  for (std::size_t i = 0; i < layout.sections.size(); ++i) {
    const auto& h = layout.sections[i].header;
    if (!has_raw(h)) continue;
    if (fa > 0 && (h.pointer_to_raw_data % fa != 0 || h.size_of_raw_data % fa != 0)) {
      return "section " + std::to_string(i) + " raw range is not file-aligned";
    }
    if (h.pointer_to_raw_data < cursor) return "section " + std::to_string(i) + " raw range out of order";
    cursor = std::size_t{h.pointer_to_raw_data} + h.size_of_raw_data;
  }
  return std::nullopt;
}

Bytes make_fixture(const FixtureSpec& spec) {
  using K = PeError::Kind;
  const std::uint32_t fa = spec.file_alignment;
  const std::uint32_t sa = spec.section_alignment;
  if (fa == 0 || (fa & (fa - 1)) != 0) fail(K::InvalidSpec, "file alignment must be a power of two");
  if (sa < fa || (sa & (sa - 1)) != 0) fail(K::InvalidSpec, "section alignment must be a power of two >= file alignment");
  if (spec.sections.size() > 96) fail(K::InvalidSpec, "too many sections");

  constexpr std::size_t kOptSize = 0xE0;
  const std::size_t table_bytes = 4 + kCoffHeaderSize + kOptSize + spec.sections.size() * kSectionHeaderSize;

  std::size_t pe_offset = 0x80;
  if (spec.tight_headers) {
    pe_offset = (fa - table_bytes % fa) % fa;
    while (pe_offset < kDosHeaderSize) pe_offset += fa;
  }

  Rng rng(spec.seed);
  PeLayout layout;
  layout.pe_offset = static_cast<std::uint32_t>(pe_offset);
  layout.dos_stub.assign(pe_offset, 0);
  {
    std::span<std::uint8_t> d(layout.dos_stub);
    d[0] = 'M';
    d[1] = 'Z';
    store_u16(d, 0x02, 0x0090);  // bytes on last page
    store_u16(d, 0x04, 0x0003);  // pages
    store_u16(d, 0x08, 0x0004);  // header paragraphs
    store_u16(d, 0x0C, 0xFFFF);  // max alloc
    store_u16(d, 0x10, 0x00B8);  // initial SP
    store_u16(d, 0x18, 0x0040);  // relocation table offset
    store_u32(d, kLfanewOffset, layout.pe_offset);
    static constexpr std::string_view kMsg = "This program cannot be run in DOS mode.\r\r\n$";
    std::size_t at = kDosHeaderSize;
    for (std::size_t i = 0; i < kMsg.size() && at < pe_offset; ++i) d[at++] = static_cast<std::uint8_t>(kMsg[i]);
    while (at < pe_offset) d[at++] = rng.byte();
  }

  layout.coff.machine = 0x014C;
  layout.coff.number_of_sections = static_cast<std::uint16_t>(spec.sections.size());
  layout.coff.time_date_stamp = static_cast<std::uint32_t>(rng.next());
  layout.coff.size_of_optional_header = kOptSize;
  layout.coff.characteristics = 0x0102;  // EXECUTABLE_IMAGE | 32BIT_MACHINE

  const std::size_t table_end = pe_offset + table_bytes;
  const std::size_t size_of_headers =
      spec.tight_headers ? table_end : align_up(table_end + spec.header_room, fa);

  std::uint32_t va = static_cast<std::uint32_t>(align_up(size_of_headers, sa));
  std::size_t ptr = size_of_headers;
  std::uint32_t code_size = 0, data_size = 0, entry = 0, base_of_code = 0, base_of_data = 0;
  for (const auto& fs : spec.sections) {
    Section s;
    s.header.name = section_name(fs.name);
    const std::size_t raw = align_up(fs.body.size() + fs.slack, fa);
    if (raw > 0xFFFFFFFFu) fail(K::InvalidSpec, "section too large");
    s.header.size_of_raw_data = static_cast<std::uint32_t>(raw);
    s.header.virtual_size = static_cast<std::uint32_t>(raw - fs.slack);
    s.header.virtual_address = va;
    s.header.pointer_to_raw_data = raw > 0 ? static_cast<std::uint32_t>(ptr) : 0;
    s.header.characteristics = fs.executable ? (kScnCntCode | kScnMemExecute | kScnMemRead)
                                             : (kScnCntInitializedData | kScnMemRead | kScnMemWrite);
    s.data = fs.body;
    s.data.resize(raw, 0);
    if (fs.executable) {
      code_size += s.header.size_of_raw_data;
      if (entry == 0) entry = base_of_code = va;
    } else {
      data_size += s.header.size_of_raw_data;
      if (base_of_data == 0) base_of_data = va;
    }
    ptr += raw;
    va = static_cast<std::uint32_t>(align_up(std::uint64_t{va} + std::max<std::uint32_t>(s.header.virtual_size, 1), sa));
    layout.sections.push_back(std::move(s));
  }
  layout.header_padding.assign(size_of_headers - table_end, 0);
  layout.overlay = spec.overlay;

  auto& opt = layout.optional_header;
  opt.magic = kMagicPe32;
  opt.section_alignment = sa;
  opt.file_alignment = fa;
  opt.size_of_headers = static_cast<std::uint32_t>(size_of_headers);
  opt.size_of_image = va;
  opt.raw.assign(kOptSize, 0);
  std::span<std::uint8_t> o(opt.raw);
  o[2] = 14;  // linker version
  store_u32(o, 4, code_size);
  store_u32(o, 8, data_size);
  store_u32(o, 16, entry);
  store_u32(o, 20, base_of_code);
  store_u32(o, 24, base_of_data);
  store_u32(o, 28, 0x00400000);  // image base
  store_u16(o, 40, 6);           // OS version
  store_u16(o, 48, 6);           // subsystem version
  store_u16(o, 68, 3);           // console subsystem
  store_u16(o, 70, 0x8140);      // NX compatible, dynamic base, terminal-server aware
  store_u32(o, 72, 0x100000);
  store_u32(o, 76, 0x1000);
  store_u32(o, 80, 0x100000);
  store_u32(o, 84, 0x1000);
  store_u32(o, 92, 16);  // data directory count; all entries zero
  return serialize(layout);
}

}  // namespace pforge::pe
