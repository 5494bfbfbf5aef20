#include "fusenet/util.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <thread>

#include "fusenet/errors.hpp"

namespace fusenet {

std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) raise(Errc::IoFailure, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  if (!in.good() && !in.eof()) raise(Errc::IoFailure, "read failed for " + path.string());
  return ss.str();
}

void write_file_bytes(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) raise(Errc::IoFailure, "cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out.good()) raise(Errc::IoFailure, "write failed for " + path.string());
}

std::string content_hash_hex(const std::filesystem::path& path) {
  const std::string bytes = read_file_bytes(path);
  const std::uint64_t h = fnv1a64(bytes);
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

int worker_threads() {
  int hw = static_cast<int>(std::thread::hardware_concurrency());
  if (hw < 1) hw = 1;
  if (const char* env = std::getenv("FUSENET_THREADS")) {
    const int requested = std::atoi(env);
    if (requested >= 1 && requested < hw) return requested;
    if (requested >= hw) return hw;
  }
  return hw;
}

}  // namespace fusenet
