import math

import numpy as np
import pytest

from commodvol.amerconv import (AmericanQuote, DegenerateQuote, TreeConfig, american_implied_vol,
                                americans_to_europeans, local_vol_tree_call, trinomial_american_call)
from commodvol.black import black_call_normalized
from commodvol.errors import ConfigurationError, ConversionError, DataError
from oracles import crr_american_futures_call


def black_price(F, K, tau, r, sigma):
    return math.exp(-r * tau) * F * black_call_normalized(tau, math.log(K / F), sigma)


class TestTree:
    @pytest.mark.parametrize("K,tau,sigma", [(0.9, 0.5, 0.3), (1.0, 0.2, 0.4), (1.2, 1.0, 0.25)])
    def test_zero_rate_is_european(self, K, tau, sigma):
        am = trinomial_american_call(1.0, K, tau, 0.0, sigma, TreeConfig(1000))
        assert am == pytest.approx(black_price(1.0, K, tau, 0.0, sigma), rel=1e-3)

    def test_zero_vol_exercises_immediately(self):
        assert trinomial_american_call(1.0, 0.8, 0.5, 0.05, 0.0) == pytest.approx(0.2, abs=1e-15)
        assert trinomial_american_call(1.0, 1.2, 0.5, 0.05, 0.0) == 0.0
        # The vanishing-volatility limit of the lattice agrees.
        assert trinomial_american_call(1.0, 0.8, 0.5, 0.05, 1e-4, TreeConfig(500)) == pytest.approx(0.2, abs=1e-12)

    @pytest.mark.parametrize("F,K,tau,r,sigma", [(1.0, 0.9, 0.5, 0.03, 0.3), (1.0, 1.1, 1.0, 0.08, 0.5),
                                                 (2.0, 1.5, 0.25, 0.05, 0.2)])
    def test_matches_binomial_oracle(self, F, K, tau, r, sigma):
        tri = trinomial_american_call(F, K, tau, r, sigma, TreeConfig(1000))
        crr = crr_american_futures_call(F, K, tau, r, sigma, steps=4000)
        assert tri == pytest.approx(crr, rel=5e-4)

    def test_european_style_is_discounted_black(self):
        p = trinomial_american_call(1.0, 0.95, 0.5, 0.04, 0.3, TreeConfig(1000, style="european"))
        assert p == pytest.approx(black_price(1.0, 0.95, 0.5, 0.04, 0.3), rel=1e-4)

    def test_american_dominates_european(self):
        p = trinomial_american_call(1.0, 0.7, 1.0, 0.1, 0.2)
        assert p >= black_price(1.0, 0.7, 1.0, 0.1, 0.2) - 1e-9

    def test_doubling_steps(self):
        """1000 versus 2000 steps differ by under 0.05% wherever the price is not negligible.

        The 7-standard-deviation out-of-the-money corner (price ~4e-15) is
        left out: relative changes at that size are rounding noise.
        """
        for sigma in (0.1, 0.3, 0.5, 0.8):
            for K in (0.8, 0.9, 1.0, 1.1, 1.25):
                for tau in (0.1, 0.5, 1.0):
                    a = trinomial_american_call(1.0, K, tau, 0.05, sigma, TreeConfig(1000))
                    b = trinomial_american_call(1.0, K, tau, 0.05, sigma, TreeConfig(2000))
                    if b < 1e-10:
                        continue
                    assert abs(a - b) <= 5e-4 * b, (sigma, K, tau)

    def test_local_vol_tree_with_constant_vol(self):
        p = local_vol_tree_call(1.0, 0.9, 0.5, 0.03, lambda t, x: np.full(np.broadcast(t, x).shape, 0.3),
                                TreeConfig(800))
        assert p == pytest.approx(trinomial_american_call(1.0, 0.9, 0.5, 0.03, 0.3, TreeConfig(800)), rel=1e-12)

    def test_sigma_ref_must_bound(self):
        with pytest.raises(ConfigurationError):
            local_vol_tree_call(1.0, 0.9, 0.5, 0.0, lambda t, x: 0.3 + 0 * x, sigma_ref=0.2)

    def test_steps_rule(self):
        assert TreeConfig().steps_for(0.1) == 250
        assert TreeConfig().steps_for(0.5) == 500
        with pytest.raises(ConfigurationError):
            TreeConfig(steps=10)

    def test_invalid_inputs(self):
        with pytest.raises(DataError):
            trinomial_american_call(-1.0, 1.0, 0.5, 0.0, 0.2)
        with pytest.raises(DataError):
            trinomial_american_call(1.0, 1.0, 0.5, 0.0, -0.2)


class TestImpliedVol:
    def test_tree_round_trip(self):
        cfg = TreeConfig(400)
        price = trinomial_american_call(1.0, 0.95, 0.4, 0.03, 0.35, cfg)
        q = AmericanQuote(1.0, 0.95, 0.4, price, rate=0.03, dividend_yield=0.03)
        assert american_implied_vol(q, cfg) == pytest.approx(0.35, abs=1e-6)

    def test_zero_rate_black_quote(self):
        q = AmericanQuote(1.0, 1.05, 0.3, black_price(1.0, 1.05, 0.3, 0.0, 0.4))
        assert american_implied_vol(q) == pytest.approx(0.4, abs=1e-4)

    def test_intrinsic_quote_is_degenerate(self):
        q = AmericanQuote(1.0, 0.5, 0.2, 0.5, rate=0.03)
        with pytest.raises(DegenerateQuote):
            american_implied_vol(q)

    def test_above_band(self):
        q = AmericanQuote(1.0, 1.0, 0.2, 0.99, rate=0.03)
        with pytest.raises(ConversionError) as info:
            american_implied_vol(q)
        assert info.value.quote is q

    def test_below_intrinsic_rejected_on_construction(self):
        with pytest.raises(ConversionError):
            AmericanQuote(1.0, 0.8, 0.2, 0.1)


class TestConversion:
    def test_european_quotes_pass_through(self):
        quotes = [AmericanQuote(1.0, K, 0.2, black_price(1.0, K, 0.2, 0.0, 0.3), style="european")
                  for K in (0.9, 1.0, 1.1)]
        conv = americans_to_europeans(quotes)
        np.testing.assert_array_equal(conv.quotes.prices, [q.price for q in quotes])
        assert not conv.dropped

    def test_european_quotes_are_undiscounted(self):
        q = AmericanQuote(1.0, 1.0, 0.5, 0.1, rate=0.04, style="european")
        conv = americans_to_europeans([q])
        assert conv.quotes.prices[0] == pytest.approx(0.1 * math.exp(0.02), rel=1e-15)

    def test_zero_rate_tree_quote(self):
        cfg = TreeConfig(500)
        price = trinomial_american_call(1.0, 1.1, 0.3, 0.0, 0.2, cfg)
        conv = americans_to_europeans([AmericanQuote(1.0, 1.1, 0.3, price)], cfg)
        assert conv.quotes.prices[0] == pytest.approx(black_price(1.0, 1.1, 0.3, 0.0, 0.2), rel=1e-3)

    def test_identity_on_zero_rate_data(self):
        quotes = [AmericanQuote(1.0, K, t, black_price(1.0, K, t, 0.0, 0.3)) for t in (0.2, 0.4)
                  for K in (0.9, 1.0, 1.1)]
        conv = americans_to_europeans(quotes)
        np.testing.assert_allclose(conv.quotes.prices, [q.price for q in quotes], rtol=1e-3)

    def test_degenerate_quote_dropped_and_reported(self):
        good = AmericanQuote(1.0, 1.0, 0.2, black_price(1.0, 1.0, 0.2, 0.0, 0.3))
        flat = AmericanQuote(1.0, 0.5, 0.2, 0.5)
        conv = americans_to_europeans([good, flat])
        assert conv.kept.tolist() == [True, False]
        assert conv.dropped[0].reason == "degenerate"
        assert conv.report()["kept"] == 1

    def test_empty_maturity_is_an_error(self):
        with pytest.raises(ConversionError, match="dropped"):
            americans_to_europeans([AmericanQuote(1.0, 0.5, 0.2, 0.5)])

    def test_inconsistent_futures(self):
        with pytest.raises(DataError):
            americans_to_europeans([AmericanQuote(1.0, 1.0, 0.2, 0.05), AmericanQuote(1.1, 1.0, 0.2, 0.1)])
