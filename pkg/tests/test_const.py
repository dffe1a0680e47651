"""
Checks on the shared constants module.

Run with: pytest tests/test_const.py -v
"""
import re
from pathlib import Path

from nutriscreen import const

ROOT = Path(__file__).resolve().parents[1]


class TestConstants:
    """Tests for the constants module."""

    def test_every_constant_is_read(self):
        """Each constant is referenced by the package or its tests."""
        files = [*(ROOT / "nutriscreen").glob("*.py"), *(ROOT / "tests").glob("test_*.py")]
        sources = "\n".join(
            path.read_text(encoding="utf-8") for path in files if path.name not in ("const.py", "test_const.py")
        )
        names = [name for name in vars(const) if name.isupper()]
        unused = [name for name in names if not re.search(rf"\b{name}\b", sources)]
        assert unused == []
