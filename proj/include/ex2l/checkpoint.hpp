#pragma once

// Versioned flat binary for parameter snapshots: magic, version, per-net
// architecture string and named shape table, then little-endian doubles.

#include <string>
#include <utility>
#include <vector>

#include "ex2l/ndarray.hpp"
#include "ex2l/network.hpp"

namespace ex2l {

struct NetSnapshot {
  std::string name;  // "label" or "confounder"
  std::string arch;
  std::vector<std::pair<std::string, NDArray>> params;
};

struct CheckpointFile {
  std::uint32_t version = 1;
  std::vector<NetSnapshot> nets;

  const NetSnapshot* find(const std::string& name) const;
};

NetSnapshot snapshot_net(const Network& net, std::string name);
NetSnapshot snapshot_net(const Network& net, std::string name,
                         const std::vector<NDArray>& params);

// Builds the network described by the snapshot and loads its parameters.
Network instantiate_net(const NetSnapshot& snap);

void save_checkpoint(const CheckpointFile& file, const std::string& path);
CheckpointFile load_checkpoint(const std::string& path);

}  // namespace ex2l
