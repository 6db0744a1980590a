#pragma once

#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

namespace CLI {
class App;
}

namespace wpclip::cli {

// Bound option storage; every subcommand writes into its own block.
struct Options;

struct AppHandle {
  std::unique_ptr<Options> options;
  std::unique_ptr<CLI::App> app;

  AppHandle();
  AppHandle(AppHandle&&) noexcept;
  AppHandle& operator=(AppHandle&&) noexcept;
  ~AppHandle();
};

// Builds the full command tree. Help text for every flag comes from here.
AppHandle make_app();

std::vector<std::string> subcommand_names();

// Runs one command line and maps failures to exit codes: 0 success, 1 input or
// configuration error, 2 runtime error. Errors go to `err` as one JSON line.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace wpclip::cli
