"""Formula strings used by several test modules."""

VOL_REGIME_REVERSAL = (
    "IfElse(Greater(Std($returns, 12), Mean(Std($returns, 12), 48)), "
    "Neg(CsRank(Delta($close, 3))), "
    "Neg(CsRank(Div(Sub($close, $low), Add(Sub($high, $low), 0.0001)))))"
)

VWAP_TS_REVERSAL = "Neg(TsRank(Div(Sub($close, $vwap), $vwap), 24))"
VWAP_DELTA_REVERSAL = "Neg(CsRank(Delta(Sub($close, $vwap), 3)))"
SHORT_REVERSAL = "Neg(CsRank(Delta($close, 3)))"
LOW_LOG_SIGNED_POWER = "SignedPower(Log(Div($low, Delay($close, 1))), 0.5)"

PUBLISHED_FORMULAS = (
    VOL_REGIME_REVERSAL,
    VWAP_TS_REVERSAL,
    VWAP_DELTA_REVERSAL,
    SHORT_REVERSAL,
    LOW_LOG_SIGNED_POWER,
)
