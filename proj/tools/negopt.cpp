#include "negopt/cli.hpp"

int main(int argc, char** argv) {
    return negopt::cli::run(std::vector<std::string>(argv, argv + argc));
}
