import pytest

from cfasim.apps import PASSWORD
from cfasim.asm import AsmError, assemble, disassemble, disassemble_image
from cfasim.isa import INSTR_SIZE


def test_two_instruction_segment_is_eight_bytes():
    res = assemble("        .org 0x9000\n        NOP\n        HALT\n")
    assert len(res.image.segments) == 1
    assert len(res.image.segments[0].data) == 8


def test_forward_label_resolves():
    res = assemble("""
        .org 0x9000
        CALL target
        HALT
target: NOP
""")
    ins = res.image.segments[0].data[:4]
    assert res.symbols["target"] == 0x9008
    assert int.from_bytes(ins[2:4], "little") == 0x9008


def test_backward_label_and_expressions():
    res = assemble("""
        .org 0x9000
top:    NOP
        JMP top
        MOV r0, #top+4
""")
    data = res.image.segments[0].data
    assert int.from_bytes(data[6:8], "little") == 0x9000
    assert int.from_bytes(data[10:12], "little") == 0x9004


def test_word_directive_and_multiple_segments():
    res = assemble("""
        .org 0x9000
        NOP
        .org 0x0042
        .word isr, 0x1234
        .org 0x9100
isr:    RETI
""")
    bases = sorted(seg.base for seg in res.image.segments)
    assert bases == [0x0042, 0x9000, 0x9100]
    ivt = next(s for s in res.image.segments if s.base == 0x0042)
    assert ivt.data == (0x9100).to_bytes(2, "little") + (0x1234).to_bytes(2, "little")


def test_unknown_mnemonic_rejected():
    with pytest.raises(AsmError, match="unknown mnemonic"):
        assemble("        .org 0x9000\n        FROB r1\n")


def test_duplicate_label_rejected():
    with pytest.raises(AsmError, match="duplicate"):
        assemble("        .org 0x9000\nx:      NOP\nx:      NOP\n")


def test_undefined_label_rejected():
    with pytest.raises(AsmError, match="undefined"):
        assemble("        .org 0x9000\n        JMP nowhere\n")


def test_out_of_range_value_rejected():
    with pytest.raises(AsmError, match="16-bit"):
        assemble("        .org 0x9000\n        MOV r0, #0x10000\n")


def test_code_before_org_rejected():
    with pytest.raises(AsmError, match="before any"):
        assemble("        NOP\n")


def test_disassemble_roundtrips_reassembly():
    source = """
        .org 0x9000
        MOV r1, #0x12
        MOV r2, r1
        MOV r3, SP
        MOV r4, &0x1000
        MOV &0x1002, r4
        MOV r5, @r2
        MOV @r2, r5
        MOV r6, 0x4(r2)
        MOV 0x6(r2), r6
        ADD r1, #1
        SUB r1, r2
        CMP r1, #0
        JZ 0x9000
        JNZ 0x9004
        JMP 0x9008
        CALL 0x9000
        CALLI r3
        PUSH r1
        POP r2
        RET
        RETI
        EINT
        DINT
        NOP
        HALT
"""
    first = assemble(source)
    listing = disassemble_image(first.image)
    rebuilt_src = "        .org 0x9000\n" + "".join(
        f"        {text}\n" for _, text in listing)
    second = assemble(rebuilt_src)
    assert second.image.segments[0].data == first.image.segments[0].data


def test_password_app_roundtrips():
    first = assemble(PASSWORD)
    for seg in first.image.segments:
        listing = disassemble(seg.data, seg.base)
        rebuilt = assemble(f"        .org {seg.base:#x}\n" + "".join(
            f"        {text}\n" for _, text in listing))
        assert rebuilt.image.segments[0].data == seg.data


def test_addresses_advance_by_instruction_size():
    res = assemble("        .org 0x9000\n        NOP\n        NOP\n        NOP\n")
    listing = disassemble_image(res.image)
    assert [a for a, _ in listing] == [0x9000 + i * INSTR_SIZE for i in range(3)]
