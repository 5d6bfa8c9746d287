# KripkeGuard Test Suite
