/// Joint objective `l_ct + α·l_s`.
pub fn total_loss(l_ct: f64, l_s: f64, alpha: f64) -> f64 {
    l_ct + alpha * l_s
}

#[cfg(test)]
mod tests {
    use super::total_loss;

    #[test]
    fn weighted_sum() {
        assert_eq!(total_loss(0.7, 0.1, 0.0), 0.7);
        assert!((total_loss(0.2, 0.1, 1.0) - 0.3).abs() < 1e-15);
        assert!((total_loss(0.0, 0.1, 2.0) - 0.2).abs() < 1e-15);
    }
}
