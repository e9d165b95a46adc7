// SPDX-License-Identifier: Apache-2.0
#include <string>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "transunet/cli.hpp"

int main(int argc, char** argv) {
#if defined(__GLIBC__)
  // Activation buffers are large and short-lived; keep them out of mmap and
  // stop the heap from being trimmed between training steps.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, -1);
#endif
  return transunet::run_cli(std::vector<std::string>(argv, argv + argc));
}
