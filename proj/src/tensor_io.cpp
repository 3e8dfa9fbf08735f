#include "calibseg/tensor_io.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <limits>

namespace calibseg {

static_assert(std::endian::native == std::endian::little, "TNSR io assumes a little-endian host");
static_assert(sizeof(float) == 4 && std::numeric_limits<float>::is_iec559);

namespace {

constexpr std::array<char, 8> kMagic = {'T', 'N', 'S', 'R', '0', '0', '0', '1'};

void write_u32(std::ostream& os, std::uint32_t v) {
    os.write(reinterpret_cast<const char*>(&v), 4);
}

std::uint32_t read_u32(std::istream& is) {
    std::uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 4);
    if (!is) throw IoError("tensor stream truncated");
    return v;
}

} // namespace

void write_tensor(std::ostream& os, const Tensor& t) {
    if (!t.defined()) throw IoError("cannot write undefined tensor");
    os.write(kMagic.data(), kMagic.size());
    write_u32(os, static_cast<std::uint32_t>(t.rank()));
    for (int i = 0; i < t.rank(); ++i) write_u32(os, static_cast<std::uint32_t>(t.dim(i)));
    os.write(reinterpret_cast<const char*>(t.data().data()),
             static_cast<std::streamsize>(t.data().size() * sizeof(float)));
    if (!os) throw IoError("tensor write failed");
}

Tensor read_tensor(std::istream& is) {
    std::array<char, 8> magic{};
    is.read(magic.data(), magic.size());
    if (!is || magic != kMagic) throw IoError("bad tensor magic");
    const std::uint32_t rank = read_u32(is);
    if (rank == 0 || rank > 4) throw IoError("unsupported tensor rank " + std::to_string(rank));
    Shape shape(rank);
    std::int64_t numel = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
        const std::uint32_t d = read_u32(is);
        if (d == 0 || d > (1u << 24)) throw IoError("bad tensor extent " + std::to_string(d));
        shape[i] = static_cast<int>(d);
        numel *= d;
    }
    if (numel > (std::int64_t{1} << 31)) throw IoError("tensor too large");
    std::vector<float> data(static_cast<std::size_t>(numel));
    is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(float)));
    if (!is) throw IoError("tensor stream truncated");
    return Tensor::from_data(std::move(shape), std::move(data));
}

void save_tensor(const std::filesystem::path& path, const Tensor& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path.string());
    write_tensor(os, t);
    os.flush();
    if (!os) throw IoError("tensor write failed: " + path.string());
}

Tensor load_tensor(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path.string());
    return read_tensor(is);
}

} // namespace calibseg
