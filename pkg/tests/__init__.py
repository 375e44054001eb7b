# Tests for idtrack
