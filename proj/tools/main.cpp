#include <cstdio>

int main() {
    std::printf("dyncap: command wiring pending\n");
    return 0;
}
