#include <string>
#include <vector>

#include "bfa/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return bfa::run_cli(args);
}
