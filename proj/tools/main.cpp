#include <iostream>

int main() {
  std::cout << "msiseg (under construction)\n";
  return 0;
}
