#include "doctest.h"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "calibseg/rng.hpp"
#include "calibseg/tensor_io.hpp"
#include "oracles.hpp"

using namespace calibseg;

TEST_CASE("tensor stream round trip is bit exact") {
    auto rng = Rng::keyed(21, 200);
    auto t = oracle::random_tensor({2, 3, 4, 5}, rng);
    std::stringstream ss;
    write_tensor(ss, t);
    auto back = read_tensor(ss);
    REQUIRE(back.shape() == t.shape());
    for (std::size_t i = 0; i < t.data().size(); ++i) CHECK(back.data()[i] == t.data()[i]);
}

TEST_CASE("tensor file round trip") {
    namespace fs = std::filesystem;
    auto dir = fs::temp_directory_path() / "calibseg_io_test";
    fs::create_directories(dir);
    auto path = dir / "t.tnsr";
    auto rng = Rng::keyed(22, 201);
    auto t = oracle::random_tensor({7}, rng);
    save_tensor(path, t);
    auto back = load_tensor(path);
    REQUIRE(back.shape() == t.shape());
    for (std::size_t i = 0; i < t.data().size(); ++i) CHECK(back.data()[i] == t.data()[i]);
    fs::remove_all(dir);
}

TEST_CASE("tensor header layout is stable") {
    auto t = Tensor::from_data({1, 2}, {1.0f, 2.0f});
    std::stringstream ss;
    write_tensor(ss, t);
    const std::string bytes = ss.str();
    REQUIRE(bytes.size() == 8 + 4 + 2 * 4 + 2 * 4);
    CHECK(bytes.substr(0, 8) == "TNSR0001");
    CHECK(static_cast<unsigned char>(bytes[8]) == 2); // rank, little endian
    CHECK(static_cast<unsigned char>(bytes[12]) == 1);
    CHECK(static_cast<unsigned char>(bytes[16]) == 2);
}

TEST_CASE("malformed tensor streams are rejected") {
    std::stringstream bad_magic("XXXX0001");
    CHECK_THROWS_AS(read_tensor(bad_magic), IoError);

    auto t = Tensor::from_data({4}, {1, 2, 3, 4});
    std::stringstream ss;
    write_tensor(ss, t);
    std::string bytes = ss.str();
    std::stringstream truncated(bytes.substr(0, bytes.size() - 3));
    CHECK_THROWS_AS(read_tensor(truncated), IoError);

    CHECK_THROWS_AS(load_tensor("/nonexistent/path/t.tnsr"), IoError);
}
