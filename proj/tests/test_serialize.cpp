#include "doctest.h"

#include "lpfa/serialize.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>

using namespace lpfa;

namespace {

Mat random_mat(std::size_t r, std::size_t c, std::mt19937_64& rng, Grid g) {
  Mat m = Mat::zeros(r, c, g);
  std::uniform_real_distribution<double> dist(-100.0, 100.0);
  for (double& x : m.data) x = snap(dist(rng), g);
  return m;
}

std::filesystem::path temp_file(const char* name) {
  return std::filesystem::temp_directory_path() / name;
}

}  // namespace

TEST_CASE("fnv1a matches published vectors") {
  CHECK(fnv1a({}) == 0xcbf29ce484222325ull);
  const char a[] = {'a'};
  CHECK(fnv1a(std::as_bytes(std::span(a))) == 0xaf63dc4c8601ec8cull);
  const char foobar[] = {'f', 'o', 'o', 'b', 'a', 'r'};
  CHECK(fnv1a(std::as_bytes(std::span(foobar))) == 0x85944171f73967e8ull);
}

TEST_CASE("CSV round-trips exactly") {
  std::mt19937_64 rng(11);
  for (Grid g : {Grid::B16, Grid::F32, Grid::F64}) {
    const Mat m = random_mat(7, 5, rng, g);
    const Mat back = mat_from_csv(mat_to_csv(m));
    CHECK(back.rows == m.rows);
    CHECK(back.cols == m.cols);
    CHECK(back.grid == m.grid);
    CHECK(back.data == m.data);
  }

  Mat zeros = Mat::zeros(1, 2);
  zeros.data = {0.0, -0.0};
  const Mat back = mat_from_csv(mat_to_csv(zeros));
  CHECK(back.data[0] == 0.0);
  CHECK(!std::signbit(back.data[0]));
  CHECK(std::signbit(back.data[1]));
}

TEST_CASE("CSV file io and error paths") {
  std::mt19937_64 rng(12);
  const Mat m = random_mat(3, 4, rng, Grid::F64);
  const auto path = temp_file("lpfa_test_mat.csv");
  write_mat_csv(path, m);
  const Mat back = read_mat_csv(path);
  CHECK(back.data == m.data);
  std::filesystem::remove(path);

  CHECK_THROWS(mat_from_csv("1,2\n3,4\n"));  // no header
  CHECK_THROWS(mat_from_csv("# lpfa-mat grid=F64 rows=2 cols=2\n1,2\n3\n"));
  CHECK_THROWS(mat_from_csv("# lpfa-mat grid=XXX rows=1 cols=1\n1\n"));
}

TEST_CASE("binary matrix round-trips bitwise") {
  std::mt19937_64 rng(13);
  for (Grid g : {Grid::B16, Grid::F32, Grid::F64}) {
    const Mat m = random_mat(6, 9, rng, g);
    const Mat back = mat_from_bytes(mat_to_bytes(m));
    CHECK(back.grid == m.grid);
    CHECK(back.rows == m.rows);
    CHECK(back.cols == m.cols);
    for (std::size_t i = 0; i < m.data.size(); ++i) {
      CHECK(std::memcmp(&back.data[i], &m.data[i], 8) == 0);
    }
  }

  auto bytes = mat_to_bytes(random_mat(2, 2, rng, Grid::F64));
  bytes[0] = std::byte{'X'};
  CHECK_THROWS(mat_from_bytes(bytes));

  auto truncated = mat_to_bytes(random_mat(2, 2, rng, Grid::F64));
  truncated.resize(truncated.size() - 5);
  CHECK_THROWS(mat_from_bytes(truncated));
}

TEST_CASE("vector blobs reuse the matrix format") {
  Vec v = Vec::zeros(4, Grid::F32);
  v.data = {1.5, -2.25, 0.0, 8.0};
  const Vec back = vec_from_bytes(vec_to_bytes(v));
  CHECK(back.grid == v.grid);
  CHECK(back.data == v.data);
}

TEST_CASE("container round-trips and detects corruption") {
  std::mt19937_64 rng(14);
  const Mat a = random_mat(4, 4, rng, Grid::B16);
  const Mat b = random_mat(2, 8, rng, Grid::F64);
  std::vector<Section> sections{{"a", mat_to_bytes(a)}, {"b", mat_to_bytes(b)}};
  const auto path = temp_file("lpfa_test_container.bin");
  write_container(path, sections);

  const auto back = read_container(path);
  REQUIRE(back.size() == 2);
  CHECK(find_section(back, "a") != nullptr);
  CHECK(find_section(back, "missing") == nullptr);
  const Mat a2 = mat_from_bytes(find_section(back, "a")->bytes);
  CHECK(a2.data == a.data);
  const Mat b2 = mat_from_bytes(find_section(back, "b")->bytes);
  CHECK(b2.data == b.data);

  // Flip one payload byte: the section checksum must catch it.
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(-1, std::ios::end);
    char c;
    f.seekg(-1, std::ios::end);
    f.get(c);
    f.seekp(-1, std::ios::end);
    c = static_cast<char>(c ^ 0x01);
    f.put(c);
  }
  CHECK_THROWS_WITH_AS(static_cast<void>(read_container(path)),
                       doctest::Contains("checksum"), std::runtime_error);

  // Truncation is reported before any checksum is computed.
  write_container(path, sections);
  const auto full = std::filesystem::file_size(path);
  std::filesystem::resize_file(path, full - 16);
  CHECK_THROWS(static_cast<void>(read_container(path)));

  std::filesystem::remove(path);
}
