#pragma once

#include <string>

#include "wseg/net.hpp"

namespace wseg {

// Versioned binary container: "WSEG" magic, format version, a config echo,
// then one record per parameter and buffer (name, rank, dims, little-endian
// f64 payload). Values round trip bit-exactly. Folded networks are rejected;
// fold after loading instead.
void save_checkpoint(const std::string& path, Network& net);
Network load_checkpoint(const std::string& path);

}  // namespace wseg
