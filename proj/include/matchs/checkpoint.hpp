#pragma once

// Binary parameter checkpoints.
//
//   magic    8 bytes  "MATCHSCK"
//   version  u32
//   count    u64
//   per parameter:
//     name length u64, name bytes
//     rank u64, extents u64 x rank
//     values f64 x numel
//
// All integers and floats are little-endian.

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "matchs/errors.hpp"
#include "matchs/tensor.hpp"

namespace matchs {

struct NamedTensor {
    std::string name;
    Tensor value;
};

inline constexpr std::array<char, 8> kCheckpointMagic = {'M', 'A', 'T', 'C', 'H', 'S', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <class T>
void write_pod(std::ostream& os, T value) {
    os.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <class T>
T read_pod(std::istream& is, const std::string& what) {
    T value{};
    if (!is.read(reinterpret_cast<char*>(&value), sizeof(T))) throw CheckpointError("truncated checkpoint reading " + what);
    return value;
}

}  // namespace detail

inline void write_checkpoint(std::ostream& os, const std::vector<NamedTensor>& params) {
    os.write(kCheckpointMagic.data(), kCheckpointMagic.size());
    detail::write_pod<std::uint32_t>(os, kCheckpointVersion);
    detail::write_pod<std::uint64_t>(os, params.size());
    for (const auto& p : params) {
        detail::write_pod<std::uint64_t>(os, p.name.size());
        os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
        detail::write_pod<std::uint64_t>(os, p.value.rank());
        for (std::size_t e : p.value.shape()) detail::write_pod<std::uint64_t>(os, e);
        os.write(reinterpret_cast<const char*>(p.value.values().data()),
                 static_cast<std::streamsize>(p.value.numel() * sizeof(double)));
    }
}

inline std::vector<NamedTensor> read_checkpoint(std::istream& is) {
    std::array<char, 8> magic{};
    if (!is.read(magic.data(), magic.size()) || magic != kCheckpointMagic) {
        throw CheckpointError("not a checkpoint (bad magic)");
    }
    const auto version = detail::read_pod<std::uint32_t>(is, "version");
    if (version != kCheckpointVersion) {
        throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
    }
    const auto count = detail::read_pod<std::uint64_t>(is, "parameter count");
    std::vector<NamedTensor> out;
    for (std::uint64_t i = 0; i < count; ++i) {
        const auto len = detail::read_pod<std::uint64_t>(is, "name length");
        if (len > (1u << 16)) throw CheckpointError("implausible parameter name length");
        std::string name(len, '\0');
        if (!is.read(name.data(), static_cast<std::streamsize>(len))) throw CheckpointError("truncated parameter name");
        const auto rank = detail::read_pod<std::uint64_t>(is, "rank");
        if (rank > 8) throw CheckpointError("implausible rank for " + name);
        Shape shape(rank);
        for (auto& e : shape) e = detail::read_pod<std::uint64_t>(is, "extent");
        std::vector<double> values(shape_numel(shape));
        if (!is.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(double)))) {
            throw CheckpointError("truncated values for " + name);
        }
        out.push_back({std::move(name), Tensor(std::move(shape), std::move(values))});
    }
    return out;
}

inline void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& params) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw CheckpointError("cannot open " + path.string() + " for writing");
    write_checkpoint(os, params);
    if (!os) throw CheckpointError("write failed for " + path.string());
}

inline std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CheckpointError("cannot open " + path.string());
    return read_checkpoint(is);
}

// Copies checkpoint values into `params` by name; every name must match in
// shape and every parameter must be present.
inline void restore_parameters(std::vector<NamedTensor>& params, const std::vector<NamedTensor>& saved) {
    if (params.size() != saved.size()) {
        throw CheckpointError("checkpoint has " + std::to_string(saved.size()) + " parameters, model has " +
                              std::to_string(params.size()));
    }
    for (auto& p : params) {
        auto it = std::find_if(saved.begin(), saved.end(), [&](const NamedTensor& s) { return s.name == p.name; });
        if (it == saved.end()) throw CheckpointError("checkpoint is missing parameter " + p.name);
        if (it->value.shape() != p.value.shape()) {
            throw CheckpointError("shape mismatch for " + p.name + ": " + shape_str(it->value.shape()) + " vs " +
                                  shape_str(p.value.shape()));
        }
        std::copy(it->value.values().begin(), it->value.values().end(), p.value.mutable_data().begin());
    }
}

}  // namespace matchs
