// Acceptance suite driver: runs the verification checks and prints one
// pass/fail line per criterion. Exit status is 0 only if every requested
// check passes.
//
//   acceptance [--only N] [--seed S] [--threads K] [--json PATH]

#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <string>

#include "fedgmm/verify.hpp"

int main(int argc, char** argv) {
  fedgmm::verify::VerifyOptions opt;
  std::string json_path;
  for (int i = 1; i < argc; ++i) {
    if (std::strcmp(argv[i], "--only") == 0 && i + 1 < argc) {
      opt.only.push_back(std::atoi(argv[++i]));
    } else if (std::strcmp(argv[i], "--seed") == 0 && i + 1 < argc) {
      opt.seed = std::strtoull(argv[++i], nullptr, 10);
    } else if (std::strcmp(argv[i], "--threads") == 0 && i + 1 < argc) {
      opt.threads = std::atoi(argv[++i]);
    } else if (std::strcmp(argv[i], "--json") == 0 && i + 1 < argc) {
      json_path = argv[++i];
    } else {
      std::fprintf(stderr, "unknown argument: %s\n", argv[i]);
      return 2;
    }
  }

  const auto results = fedgmm::verify::run_checks(opt);
  bool all = true;
  for (const auto& r : results) {
    all = all && r.pass;
    std::printf("[%s] criterion %2d: %s (%.1f s)\n", r.pass ? "PASS" : "FAIL",
                r.id, r.name.c_str(), r.seconds);
  }
  if (!json_path.empty()) {
    std::ofstream out(json_path);
    out << fedgmm::verify::report_json(results, opt.seed, opt.threads).dump(2)
        << '\n';
  }
  return all ? 0 : 1;
}
