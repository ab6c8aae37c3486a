#ifndef C2VAE_CLI_HPP
#define C2VAE_CLI_HPP

#include <string>
#include <vector>

namespace c2vae::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

/// Parses and dispatches one command. `args` excludes the program name.
int run(const std::vector<std::string>& args);
int run(int argc, char** argv);

} // namespace c2vae::cli

#endif // C2VAE_CLI_HPP
