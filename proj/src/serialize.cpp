#include "lpfa/serialize.hpp"

#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace lpfa {

namespace {

constexpr char kMatMagic[8] = {'L', 'P', 'F', 'A', 'M', 'A', 'T', '1'};
constexpr char kContMagic[8] = {'L', 'P', 'F', 'A', 'C', 'N', 'T', '1'};

constexpr std::uint64_t bswap64(std::uint64_t v) {
  v = ((v & 0x00FF00FF00FF00FFull) << 8) | ((v >> 8) & 0x00FF00FF00FF00FFull);
  v = ((v & 0x0000FFFF0000FFFFull) << 16) | ((v >> 16) & 0x0000FFFF0000FFFFull);
  return (v << 32) | (v >> 32);
}

constexpr std::uint32_t bswap32(std::uint32_t v) {
  v = ((v & 0x00FF00FFu) << 8) | ((v >> 8) & 0x00FF00FFu);
  return (v << 16) | (v >> 16);
}

void put_u64(std::vector<std::byte>& out, std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::big) v = bswap64(v);
  const auto* p = reinterpret_cast<const std::byte*>(&v);
  out.insert(out.end(), p, p + 8);
}

void put_u32(std::vector<std::byte>& out, std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big) v = bswap32(v);
  const auto* p = reinterpret_cast<const std::byte*>(&v);
  out.insert(out.end(), p, p + 4);
}

void put_f64(std::vector<std::byte>& out, double d) {
  put_u64(out, std::bit_cast<std::uint64_t>(d));
}

struct Cursor {
  std::span<const std::byte> bytes;
  std::size_t pos = 0;

  void need(std::size_t n) const {
    if (pos + n > bytes.size()) {
      throw std::runtime_error("serialized data truncated");
    }
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v;
    std::memcpy(&v, bytes.data() + pos, 8);
    pos += 8;
    if constexpr (std::endian::native == std::endian::big) v = bswap64(v);
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v;
    std::memcpy(&v, bytes.data() + pos, 4);
    pos += 4;
    if constexpr (std::endian::native == std::endian::big) v = bswap32(v);
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(bytes[pos++]);
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes.data() + pos), n);
    pos += n;
    return s;
  }
};

std::vector<std::byte> slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<char> raw((std::istreambuf_iterator<char>(in)),
                        std::istreambuf_iterator<char>());
  std::vector<std::byte> bytes(raw.size());
  std::memcpy(bytes.data(), raw.data(), raw.size());
  return bytes;
}

void spit(const std::filesystem::path& path, std::span<const std::byte> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

Grid grid_from_tag(std::uint8_t tag) {
  switch (tag) {
    case 0: return Grid::B16;
    case 1: return Grid::F32;
    case 2: return Grid::F64;
  }
  throw std::runtime_error("unknown grid tag");
}

Grid grid_from_name(const std::string& s) {
  if (s == "B16") return Grid::B16;
  if (s == "F32") return Grid::F32;
  if (s == "F64") return Grid::F64;
  throw std::runtime_error("unknown grid name: " + s);
}

void append_shortest(std::string& out, double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  out.append(buf, res.ptr);
}

}  // namespace

std::string shortest(double v) {
  std::string out;
  append_shortest(out, v);
  return out;
}

std::uint64_t fnv1a(std::span<const std::byte> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (std::byte b : bytes) {
    h ^= static_cast<std::uint64_t>(b);
    h *= 0x100000001b3ull;
  }
  return h;
}

std::string mat_to_csv(const Mat& m) {
  std::string out = "# lpfa-mat grid=";
  out += grid_name(m.grid);
  out += " rows=" + std::to_string(m.rows) + " cols=" + std::to_string(m.cols);
  out += '\n';
  for (std::size_t i = 0; i < m.rows; ++i) {
    for (std::size_t j = 0; j < m.cols; ++j) {
      if (j) out += ',';
      append_shortest(out, m.at(i, j));
    }
    out += '\n';
  }
  return out;
}

Mat mat_from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string header;
  if (!std::getline(in, header) || header.rfind("# lpfa-mat ", 0) != 0) {
    throw std::runtime_error("missing lpfa-mat CSV header");
  }
  Mat m;
  std::istringstream hs(header.substr(11));
  std::string field;
  while (hs >> field) {
    const auto eq = field.find('=');
    if (eq == std::string::npos) throw std::runtime_error("bad header field: " + field);
    const std::string key = field.substr(0, eq), val = field.substr(eq + 1);
    if (key == "grid") {
      m.grid = grid_from_name(val);
    } else if (key == "rows") {
      m.rows = std::stoul(val);
    } else if (key == "cols") {
      m.cols = std::stoul(val);
    } else {
      throw std::runtime_error("bad header field: " + field);
    }
  }
  m.data.reserve(m.rows * m.cols);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const char* p = line.data();
    const char* end = p + line.size();
    while (p < end) {
      double v;
      const auto res = std::from_chars(p, end, v);
      if (res.ec != std::errc()) throw std::runtime_error("bad CSV number");
      m.data.push_back(v);
      p = res.ptr;
      if (p < end) {
        if (*p != ',') throw std::runtime_error("bad CSV separator");
        ++p;
      }
    }
  }
  if (m.data.size() != m.rows * m.cols) {
    throw std::runtime_error("CSV element count does not match header shape");
  }
  return m;
}

void write_mat_csv(const std::filesystem::path& path, const Mat& m) {
  const std::string text = mat_to_csv(m);
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

Mat read_mat_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return mat_from_csv(ss.str());
}

std::vector<std::byte> mat_to_bytes(const Mat& m) {
  std::vector<std::byte> out;
  out.reserve(8 + 8 + 8 + 1 + 8 * m.data.size());
  const auto* magic = reinterpret_cast<const std::byte*>(kMatMagic);
  out.insert(out.end(), magic, magic + 8);
  put_u64(out, m.rows);
  put_u64(out, m.cols);
  out.push_back(static_cast<std::byte>(m.grid));
  for (double v : m.data) put_f64(out, v);
  return out;
}

Mat mat_from_bytes(std::span<const std::byte> bytes) {
  Cursor c{bytes};
  if (c.str(8) != std::string(kMatMagic, 8)) {
    throw std::runtime_error("bad matrix magic");
  }
  Mat m;
  m.rows = c.u64();
  m.cols = c.u64();
  m.grid = grid_from_tag(c.u8());
  const std::size_t n = m.rows * m.cols;
  m.data.resize(n);
  for (std::size_t i = 0; i < n; ++i) m.data[i] = c.f64();
  if (c.pos != bytes.size()) throw std::runtime_error("trailing matrix bytes");
  return m;
}

void write_mat_bin(const std::filesystem::path& path, const Mat& m) {
  spit(path, mat_to_bytes(m));
}

Mat read_mat_bin(const std::filesystem::path& path) {
  const auto bytes = slurp(path);
  return mat_from_bytes(bytes);
}

std::vector<std::byte> vec_to_bytes(const Vec& v) {
  Mat m;
  m.rows = 1;
  m.cols = v.size();
  m.data = v.data;
  m.grid = v.grid;
  return mat_to_bytes(m);
}

Vec vec_from_bytes(std::span<const std::byte> bytes) {
  const Mat m = mat_from_bytes(bytes);
  if (m.rows != 1) throw std::runtime_error("vector blob must have one row");
  return Vec{m.data, m.grid};
}

std::vector<std::byte> container_to_bytes(const std::vector<Section>& sections) {
  std::vector<std::byte> out;
  const auto* magic = reinterpret_cast<const std::byte*>(kContMagic);
  out.insert(out.end(), magic, magic + 8);
  put_u32(out, 1u);
  put_u32(out, static_cast<std::uint32_t>(sections.size()));

  std::size_t index_size = 0;
  for (const auto& s : sections) index_size += 4 + s.name.size() + 8 + 8 + 8;
  std::uint64_t offset = out.size() + index_size;

  for (const auto& s : sections) {
    put_u32(out, static_cast<std::uint32_t>(s.name.size()));
    const auto* np = reinterpret_cast<const std::byte*>(s.name.data());
    out.insert(out.end(), np, np + s.name.size());
    put_u64(out, offset);
    put_u64(out, s.bytes.size());
    put_u64(out, fnv1a(s.bytes));
    offset += s.bytes.size();
  }
  for (const auto& s : sections) {
    out.insert(out.end(), s.bytes.begin(), s.bytes.end());
  }
  return out;
}

void write_container(const std::filesystem::path& path,
                     const std::vector<Section>& sections) {
  spit(path, container_to_bytes(sections));
}

std::vector<Section> container_from_bytes(std::span<const std::byte> bytes) {
  Cursor c{bytes};
  if (c.str(8) != std::string(kContMagic, 8)) {
    throw std::runtime_error("bad container magic");
  }
  const std::uint32_t version = c.u32();
  if (version != 1) throw std::runtime_error("unsupported container version");
  const std::uint32_t count = c.u32();

  struct Entry {
    std::string name;
    std::uint64_t offset, size, sum;
  };
  std::vector<Entry> index(count);
  for (auto& e : index) {
    const std::uint32_t len = c.u32();
    e.name = c.str(len);
    e.offset = c.u64();
    e.size = c.u64();
    e.sum = c.u64();
  }

  std::vector<Section> sections;
  sections.reserve(count);
  for (const auto& e : index) {
    if (e.offset + e.size > bytes.size()) {
      throw std::runtime_error("container truncated at section " + e.name);
    }
    Section s;
    s.name = e.name;
    s.bytes.assign(bytes.begin() + static_cast<std::ptrdiff_t>(e.offset),
                   bytes.begin() + static_cast<std::ptrdiff_t>(e.offset + e.size));
    if (fnv1a(s.bytes) != e.sum) {
      throw std::runtime_error("checksum mismatch in section " + e.name);
    }
    sections.push_back(std::move(s));
  }
  return sections;
}

std::vector<Section> read_container(const std::filesystem::path& path) {
  const auto bytes = slurp(path);
  return container_from_bytes(bytes);
}

const Section* find_section(const std::vector<Section>& sections,
                            const std::string& name) {
  for (const auto& s : sections) {
    if (s.name == name) return &s;
  }
  return nullptr;
}

}  // namespace lpfa
