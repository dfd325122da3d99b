#include <cctype>
#include <cstdint>

#include "csmcir/error.hpp"
#include "csmcir/mcot.hpp"

namespace csmcir::mcot {

namespace {

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

Vector embed_caption(std::string_view text, std::size_t dim) {
  if (dim == 0) throw DomainError("embed_caption: dimension must be positive");
  Vector out(dim, 0.0);
  std::string token;
  bool any = false;
  auto flush = [&] {
    if (token.empty()) return;
    const std::uint64_t h = fnv1a(token);
    out[h % dim] += (h >> 63) != 0 ? -1.0 : 1.0;
    any = true;
    token.clear();
  };
  for (unsigned char c : text) {
    if (std::isalnum(c) != 0) {
      token.push_back(static_cast<char>(std::tolower(c)));
    } else {
      flush();
    }
  }
  flush();
  if (!any) throw DomainError("embed_caption: text has no tokens");
  // Opposite signs can cancel to an all-zero vector; l2_normalize reports it.
  return l2_normalize(out);
}

}  // namespace csmcir::mcot
