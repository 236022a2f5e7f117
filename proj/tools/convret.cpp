#include <cstdio>

int main() {
  std::puts("convret: command-line interface under construction");
  return 1;
}
