ACCEPTANCE = {}


def record(number, title, ok, detail=""):
    """Add one checked part to acceptance criterion ``number``."""
    entry = ACCEPTANCE.setdefault(number, {"title": title, "parts": []})
    entry["parts"].append((bool(ok), detail))
    print(f"criterion {number} {title}: {'PASS' if ok else 'FAIL'} {detail}".rstrip())


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        entry = ACCEPTANCE[number]
        ok = all(p[0] for p in entry["parts"])
        detail = "; ".join(d for _, d in entry["parts"] if d)
        terminalreporter.write_line(f"criterion {number:>2} {entry['title']}: {'PASS' if ok else 'FAIL'} ({detail})")
