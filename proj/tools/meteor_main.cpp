#include <iostream>
#include <string>
#include <vector>

#include "meteor/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv, argv + argc);
    return meteor::cli::run(args, std::cout, std::cerr);
}
