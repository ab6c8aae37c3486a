#include "c2vae/cli.hpp"

int main(int argc, char** argv)
{
    return c2vae::cli::run(argc, argv);
}
