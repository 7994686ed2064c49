#include "fedtsa/netpbm.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>
#include <string>

#include "fedtsa/error.hpp"

namespace fedtsa {

namespace {

class HeaderReader {
public:
    HeaderReader(const std::vector<unsigned char>& bytes, const std::filesystem::path& path)
        : bytes_(bytes), path_(path) {}

    std::size_t next_number() {
        skip_space_and_comments();
        if (pos_ >= bytes_.size() || !std::isdigit(bytes_[pos_])) throw error("expected a number in the header");
        std::size_t value = 0;
        while (pos_ < bytes_.size() && std::isdigit(bytes_[pos_])) {
            value = value * 10 + (bytes_[pos_] - '0');
            if (value > (1u << 24)) throw error("header value too large");
            ++pos_;
        }
        return value;
    }

    // Plain-format P1 samples may be written without separators.
    std::size_t next_bit() {
        skip_space_and_comments();
        if (pos_ >= bytes_.size() || (bytes_[pos_] != '0' && bytes_[pos_] != '1')) throw error("expected a 0/1 sample");
        return static_cast<std::size_t>(bytes_[pos_++] - '0');
    }

    // Raster data starts after exactly one whitespace byte.
    std::size_t raster_start() {
        if (pos_ >= bytes_.size() || !std::isspace(bytes_[pos_])) throw error("missing whitespace before raster");
        return pos_ + 1;
    }

    IngestionError error(const std::string& why) const {
        return IngestionError("image " + path_.string() + ": " + why);
    }

private:
    void skip_space_and_comments() {
        while (pos_ < bytes_.size()) {
            if (bytes_[pos_] == '#') {
                while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
            } else if (std::isspace(bytes_[pos_])) {
                ++pos_;
            } else {
                break;
            }
        }
    }

    const std::vector<unsigned char>& bytes_;
    const std::filesystem::path& path_;
    std::size_t pos_ = 2;
};

} // namespace

bool is_netpbm_path(const std::filesystem::path& path) {
    auto ext = path.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    return ext == ".pgm" || ext == ".ppm" || ext == ".pbm" || ext == ".pnm";
}

Tensor read_netpbm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IngestionError("cannot open image " + path.string());
    const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    HeaderReader header(bytes, path);
    if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] < '1' || bytes[1] > '6')
        throw header.error("not a NetPBM file");
    const int kind = bytes[1] - '0';
    const std::size_t width = header.next_number();
    const std::size_t height = header.next_number();
    if (width == 0 || height == 0) throw header.error("zero-sized image");
    const bool bitmap = kind == 1 || kind == 4;
    const std::size_t maxval = bitmap ? 1 : header.next_number();
    if (maxval == 0 || maxval > 65535) throw header.error("maxval must be in [1,65535]");
    const std::size_t channels = (kind == 3 || kind == 6) ? 3 : 1;

    Tensor image({channels, height, width});
    auto out = image.values();
    const std::size_t plane = height * width;
    auto put = [&](std::size_t sample, std::size_t raw) {
        if (raw > maxval) throw header.error("sample exceeds maxval");
        const std::size_t pixel = sample / channels;
        const std::size_t channel = sample % channels;
        double v = static_cast<double>(raw) / static_cast<double>(maxval);
        if (bitmap) v = 1.0 - v;  // PBM: 1 is black
        out[channel * plane + pixel] = v;
    };

    const std::size_t samples = plane * channels;
    if (kind <= 3) {
        for (std::size_t s = 0; s < samples; ++s) put(s, kind == 1 ? header.next_bit() : header.next_number());
    } else if (kind == 4) {
        std::size_t pos = header.raster_start();
        const std::size_t row_bytes = (width + 7) / 8;
        if (bytes.size() < pos + row_bytes * height) throw header.error("truncated raster");
        for (std::size_t y = 0; y < height; ++y)
            for (std::size_t x = 0; x < width; ++x)
                put(y * width + x, (bytes[pos + y * row_bytes + x / 8] >> (7 - x % 8)) & 1u);
    } else {
        std::size_t pos = header.raster_start();
        const std::size_t width_bytes = maxval > 255 ? 2 : 1;
        if (bytes.size() < pos + samples * width_bytes) throw header.error("truncated raster");
        for (std::size_t s = 0; s < samples; ++s) {
            std::size_t raw = bytes[pos++];
            if (width_bytes == 2) raw = (raw << 8) | bytes[pos++];
            put(s, raw);
        }
    }
    return image;
}

void write_netpbm(const std::filesystem::path& path, const Tensor& image) {
    if (image.rank() != 3 || (image.dim(0) != 1 && image.dim(0) != 3))
        throw DimensionError("write_netpbm expects a [1|3, h, w] tensor, got " + shape_to_string(image.shape()));
    const std::size_t channels = image.dim(0), height = image.dim(1), width = image.dim(2);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IngestionError("cannot open image for writing: " + path.string());
    out << (channels == 1 ? "P5" : "P6") << '\n' << width << ' ' << height << "\n255\n";
    const std::size_t plane = height * width;
    for (std::size_t p = 0; p < plane; ++p)
        for (std::size_t c = 0; c < channels; ++c) {
            const double v = std::clamp(image[c * plane + p], 0.0, 1.0);
            out.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
        }
    if (!out) throw IngestionError("failed writing image " + path.string());
}

} // namespace fedtsa
