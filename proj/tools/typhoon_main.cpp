#include "typhoon/cli.hpp"

int main(int argc, char** argv) {
    return typhoon::cli::run(argc, argv);
}
