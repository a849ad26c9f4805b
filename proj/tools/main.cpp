#include <iostream>

#include "cli.hpp"
#include "tnseg/tensor.hpp"

int main(int argc, char** argv) {
    tnseg::tune_allocator();
    return tnseg::run_cli(argc, argv, std::cout, std::cerr);
}
