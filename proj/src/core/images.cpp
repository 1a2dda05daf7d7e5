// Image class-pool ingestion: directory walking, PGM/PNG decoding, area resize.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>

#include <png.h>

#include "metaof/error.hpp"
#include "metaof/tasks.hpp"

namespace metaof::tasks {

namespace fs = std::filesystem;

namespace {

std::string lower_ext(const fs::path& p) {
  std::string e = p.extension().string();
  std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return std::tolower(c); });
  return e;
}

// Skips whitespace and '#' comments in a PNM header.
int pnm_int(std::istream& in) {
  int c = in.peek();
  while (c != EOF) {
    if (c == '#') {
      std::string line;
      std::getline(in, line);
    } else if (std::isspace(c)) {
      in.get();
    } else {
      break;
    }
    c = in.peek();
  }
  int v = -1;
  if (!(in >> v)) throw IoError("malformed PGM header");
  return v;
}

Matrix read_pgm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open");
  std::string magic(2, '\0');
  in.read(magic.data(), 2);
  if (magic != "P5" && magic != "P2") throw IoError("not a PGM file");
  const int w = pnm_int(in);
  const int h = pnm_int(in);
  const int maxval = pnm_int(in);
  if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 65535) throw IoError("bad PGM dimensions");
  Matrix img(h, w);
  if (magic == "P2") {
    for (Eigen::Index i = 0; i < img.size(); ++i) {
      int v = 0;
      if (!(in >> v)) throw IoError("truncated PGM data");
      img.data()[i] = static_cast<double>(v) / maxval;
    }
    return img;
  }
  in.get();  // single whitespace after maxval
  const int bytes = maxval < 256 ? 1 : 2;
  std::vector<unsigned char> raw(static_cast<std::size_t>(w) * h * bytes);
  if (!in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()))) {
    throw IoError("truncated PGM data");
  }
  for (Eigen::Index i = 0; i < img.size(); ++i) {
    const auto k = static_cast<std::size_t>(i) * bytes;
    const int v = bytes == 1 ? raw[k] : (raw[k] << 8) | raw[k + 1];
    img.data()[i] = static_cast<double>(v) / maxval;
  }
  return img;
}

Matrix read_png(const fs::path& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    throw IoError(image.message);
  }
  image.format = PNG_FORMAT_GRAY;
  std::vector<png_byte> buf(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buf.data(), 0, nullptr)) {
    std::string msg = image.message;
    png_image_free(&image);
    throw IoError(msg);
  }
  Matrix img(static_cast<Eigen::Index>(image.height), static_cast<Eigen::Index>(image.width));
  for (Eigen::Index i = 0; i < img.size(); ++i) img.data()[i] = buf[static_cast<std::size_t>(i)] / 255.0;
  return img;
}

// side x n matrix whose row i holds the fractional overlap of output cell i
// with each input pixel, normalised to sum to 1.
Matrix area_weights(Eigen::Index n, int side) {
  Matrix w = Matrix::Zero(side, n);
  const double step = static_cast<double>(n) / side;
  for (int i = 0; i < side; ++i) {
    const double lo = i * step;
    const double hi = (i + 1) * step;
    for (auto p = static_cast<Eigen::Index>(std::floor(lo)); p < n && p < hi; ++p) {
      const double overlap = std::min(hi, static_cast<double>(p + 1)) - std::max(lo, static_cast<double>(p));
      if (overlap > 0) w(i, p) = overlap / step;
    }
  }
  return w;
}

}  // namespace

Matrix downsample_area(const Matrix& image, int side) {
  require(side > 0, "downsample: side must be positive");
  require(image.size() > 0, "downsample: empty image");
  return area_weights(image.rows(), side) * image * area_weights(image.cols(), side).transpose();
}

ClassPool load_image_pool(const fs::path& root, int side) {
  require(side > 0, "load_image_pool: side must be positive");
  if (!fs::is_directory(root)) throw IoError("not a directory: " + root.string());

  std::vector<fs::path> class_dirs;
  for (const auto& e : fs::directory_iterator(root)) {
    if (e.is_directory()) class_dirs.push_back(e.path());
  }
  std::sort(class_dirs.begin(), class_dirs.end());

  ClassPool pool;
  pool.dim = side * side;
  int next_id = 0;
  for (const auto& dir : class_dirs) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir)) {
      if (e.is_regular_file()) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());

    ClassSamples cls;
    cls.name = dir.filename().string();
    for (const auto& f : files) {
      const std::string ext = lower_ext(f);
      try {
        Matrix img;
        if (ext == ".pgm") {
          img = read_pgm(f);
        } else if (ext == ".png") {
          img = read_png(f);
        } else {
          pool.warnings.push_back("skipped unsupported file " + f.string());
          continue;
        }
        Matrix small = downsample_area(img, side);
        cls.samples.emplace_back(Eigen::Map<const Vector>(small.data(), small.size()));
      } catch (const IoError& err) {
        pool.warnings.push_back("skipped unreadable file " + f.string() + ": " + err.what());
      }
    }
    if (cls.samples.empty()) {
      pool.warnings.push_back("dropped empty class " + cls.name);
      continue;
    }
    cls.id = next_id++;
    pool.classes.push_back(std::move(cls));
  }
  return pool;
}

void write_pool_stats(const ClassPool& pool, const fs::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "class,samples\n";
  for (const auto& c : pool.classes) {
    out << (c.name.empty() ? std::to_string(c.id) : c.name) << ',' << c.samples.size() << '\n';
  }
}

}  // namespace metaof::tasks
