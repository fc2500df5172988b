#include <iostream>

int main() {
    std::cerr << "stainforge: error: CLI not wired up yet\n";
    return 1;
}
