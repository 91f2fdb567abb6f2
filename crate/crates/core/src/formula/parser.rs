use super::{BarKind, Factor, FactorTable, FormulaError, ModelSpec, RandomTerm, UnitKind};

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    One,
    Tilde,
    Plus,
    Star,
    Colon,
    LParen,
    RParen,
    Bar,
    DoubleBar,
    Eof,
}

fn lex(text: &str) -> Result<Vec<(Tok, usize)>, FormulaError> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        let start = i;
        let tok = match c {
            c if c.is_whitespace() => {
                i += 1;
                continue;
            }
            '~' => Tok::Tilde,
            '+' => Tok::Plus,
            '*' => Tok::Star,
            ':' => Tok::Colon,
            '(' => Tok::LParen,
            ')' => Tok::RParen,
            '|' => {
                if bytes.get(i + 1) == Some(&b'|') {
                    i += 1;
                    Tok::DoubleBar
                } else {
                    Tok::Bar
                }
            }
            '1' if !bytes
                .get(i + 1)
                .is_some_and(|b| b.is_ascii_alphanumeric() || *b == b'_' || *b == b'.') =>
            {
                Tok::One
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                while i + 1 < bytes.len()
                    && (bytes[i + 1].is_ascii_alphanumeric() || bytes[i + 1] == b'_' || bytes[i + 1] == b'.')
                {
                    i += 1;
                }
                Tok::Ident(text[start..=i].to_string())
            }
            other => {
                return Err(FormulaError::Syntax {
                    pos: start,
                    msg: format!("unexpected character `{other}`"),
                })
            }
        };
        out.push((tok, start));
        i += 1;
    }
    out.push((Tok::Eof, text.len()));
    Ok(out)
}

struct Parser<'a> {
    toks: Vec<(Tok, usize)>,
    at: usize,
    table: &'a FactorTable,
}

/// A term of the fixed part or of a bar expression: factor names joined by
/// `:` (one term) or `*` (all sub-interactions).
type Terms = Vec<Vec<String>>;

impl<'a> Parser<'a> {
    fn peek(&self) -> &Tok {
        &self.toks[self.at].0
    }

    fn pos(&self) -> usize {
        self.toks[self.at].1
    }

    fn bump(&mut self) -> Tok {
        let t = self.toks[self.at].0.clone();
        if self.at + 1 < self.toks.len() {
            self.at += 1;
        }
        t
    }

    fn err<T>(&self, msg: impl Into<String>) -> Result<T, FormulaError> {
        Err(FormulaError::Syntax { pos: self.pos(), msg: msg.into() })
    }

    fn expect(&mut self, want: Tok, what: &str) -> Result<(), FormulaError> {
        if *self.peek() == want {
            self.bump();
            Ok(())
        } else {
            self.err(format!("expected {what}, found {:?}", self.peek()))
        }
    }

    fn ident(&mut self) -> Result<String, FormulaError> {
        match self.peek().clone() {
            Tok::Ident(s) => {
                self.bump();
                Ok(s)
            }
            other => self.err(format!("expected identifier, found {other:?}")),
        }
    }

    /// `ident (("*"|":") ident)*`, expanded into its interaction terms.
    fn term(&mut self) -> Result<Terms, FormulaError> {
        // Each `*`-separated chunk is a `:`-interaction; the term is the
        // product of all chunks.
        let mut chunks: Vec<Vec<String>> = vec![vec![self.ident()?]];
        loop {
            match self.peek() {
                Tok::Colon => {
                    self.bump();
                    let id = self.ident()?;
                    chunks.last_mut().unwrap().push(id);
                }
                Tok::Star => {
                    self.bump();
                    chunks.push(vec![self.ident()?]);
                }
                _ => break,
            }
        }
        let k = chunks.len();
        let mut out = Vec::new();
        for mask in 1u32..(1 << k) {
            let mut t = Vec::new();
            for (i, c) in chunks.iter().enumerate() {
                if mask & (1 << i) != 0 {
                    t.extend(c.iter().cloned());
                }
            }
            out.push(t);
        }
        Ok(out)
    }

    /// Sum of terms, allowing a literal `1` anywhere.
    fn expr(&mut self) -> Result<Terms, FormulaError> {
        let mut out = Vec::new();
        loop {
            if *self.peek() == Tok::One {
                self.bump();
            } else {
                out.extend(self.term()?);
            }
            if *self.peek() == Tok::Plus && !matches!(self.toks[self.at + 1].0, Tok::LParen) {
                self.bump();
            } else {
                break;
            }
        }
        Ok(out)
    }

    /// Colon chain after a bar: a unit followed by optional factors.
    fn unit_chain(&mut self) -> Result<(UnitKind, Vec<String>), FormulaError> {
        let pos = self.pos();
        let mut ids = vec![self.ident()?];
        while *self.peek() == Tok::Colon {
            self.bump();
            ids.push(self.ident()?);
        }
        let t = self.table;
        let is_p = |s: &str| s == t.participant;
        let is_s = |s: &str| s == t.stimulus;
        let pair = ids.len() >= 2
            && ((is_p(&ids[0]) && is_s(&ids[1])) || (is_s(&ids[0]) && is_p(&ids[1])));
        if pair {
            return Ok((UnitKind::ParticipantStimulus, ids[2..].to_vec()));
        }
        let unit = if is_p(&ids[0]) {
            UnitKind::Participant
        } else if is_s(&ids[0]) {
            UnitKind::Stimulus
        } else if t.pair_alias.as_deref() == Some(ids[0].as_str()) {
            UnitKind::ParticipantStimulus
        } else if t.get(&ids[0]).is_some() {
            return Err(FormulaError::Syntax {
                pos,
                msg: format!("`{}` is a factor, expected a grouping unit", ids[0]),
            });
        } else {
            return Err(FormulaError::UnknownIdentifier(ids[0].clone()));
        };
        Ok((unit, ids[1..].to_vec()))
    }

    fn random_term(&mut self) -> Result<(UnitKind, BarKind, Terms), FormulaError> {
        self.expect(Tok::LParen, "`(`")?;
        // `(1|...` may be the single, constrained or a trivial correlated form.
        let lhs = self.expr()?;
        let bar = match self.peek() {
            Tok::Bar => BarKind::Correlated,
            Tok::DoubleBar => BarKind::Independent,
            other => return self.err(format!("expected `|` or `||`, found {other:?}")),
        };
        self.bump();
        let (unit, chain) = self.unit_chain()?;
        let (bar, effects) = match (self.peek().clone(), bar) {
            (Tok::Bar, BarKind::Correlated) => {
                if !lhs.is_empty() || !chain.is_empty() {
                    return self.err("constrained form is `(1|unit|expr)`");
                }
                self.bump();
                (BarKind::Constrained, self.expr()?)
            }
            (Tok::RParen, BarKind::Correlated) if lhs.is_empty() => {
                (BarKind::Single, if chain.is_empty() { vec![] } else { vec![chain] })
            }
            (Tok::RParen, _) => {
                if !chain.is_empty() {
                    return self.err("factors after `|` need a `(1|unit:...)` term");
                }
                (bar, lhs)
            }
            (other, _) => return self.err(format!("expected `)`, found {other:?}")),
        };
        self.expect(Tok::RParen, "`)`")?;
        Ok((unit, bar, effects))
    }
}

/// Parses a model formula against a factor table.
///
/// ```text
/// formula := ident "~" fixed ("+" rterm)*
/// fixed   := term ("+" term)* | "1"
/// term    := ident (("*"|":") ident)*
/// rterm   := "(" "1" "|" unit (":" ident)* ")"
///          | "(" expr ("|"|"||") unit ")"
///          | "(" "1" "|" unit "|" expr ")"
/// unit    := ident (":" ident)?
/// expr    := ("1" | term) ("+" ("1" | term))*
/// ```
pub fn parse_formula(text: &str, table: &FactorTable) -> Result<ModelSpec, FormulaError> {
    let mut p = Parser { toks: lex(text)?, at: 0, table };
    let response = p.ident()?;
    p.expect(Tok::Tilde, "`~`")?;

    let mut fixed: Terms = Vec::new();
    if *p.peek() == Tok::One {
        p.bump();
    } else if *p.peek() != Tok::LParen {
        fixed = p.expr()?;
    }

    let mut random = Vec::new();
    let mut first = fixed.is_empty() && *p.peek() == Tok::LParen;
    loop {
        if first {
            first = false;
        } else if *p.peek() == Tok::Plus {
            p.bump();
        } else {
            break;
        }
        random.push(p.random_term()?);
    }
    if *p.peek() != Tok::Eof {
        return p.err(format!("unexpected {:?}", p.peek()));
    }

    let lookup = |name: &str| -> Result<Factor, FormulaError> {
        table
            .get(name)
            .cloned()
            .ok_or_else(|| FormulaError::UnknownIdentifier(name.to_string()))
    };

    // Fixed factors keep the table's declaration order.
    let mut used: Vec<&str> = Vec::new();
    for t in &fixed {
        for n in t {
            lookup(n)?;
            if !used.contains(&n.as_str()) {
                used.push(n);
            }
        }
    }
    let fixed_factors: Vec<Factor> = table
        .factors
        .values()
        .filter(|f| used.contains(&f.name()))
        .cloned()
        .collect();
    let index = |n: &str| fixed_factors.iter().position(|f| f.name() == n).unwrap();
    let mut fixed_terms = Vec::new();
    for t in &fixed {
        let mut idx: Vec<usize> = t.iter().map(|n| index(n)).collect();
        idx.sort_unstable();
        let before = idx.len();
        idx.dedup();
        if idx.len() != before {
            return Err(FormulaError::RepeatedFactor(fixed_factors[idx[0]].name().to_string()));
        }
        fixed_terms.push(idx);
    }

    let mut terms = Vec::new();
    for (unit, bar, effects) in random {
        let gu = table.unit(unit);
        if bar != BarKind::Single || effects.is_empty() {
            terms.push(RandomTerm::intercept(gu.clone(), bar));
        }
        for e in effects {
            let factors = e.iter().map(|n| lookup(n)).collect::<Result<Vec<_>, _>>()?;
            terms.push(RandomTerm { unit: gu.clone(), factors, bar });
        }
    }
    Ok(ModelSpec::new(response, fixed_factors, fixed_terms, terms)?
        .with_unit_columns(&table.participant, &table.stimulus))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formula::{Design, FactorKind};

    fn m1() -> FactorTable {
        FactorTable::from_factors(&Design::M1.factors())
    }

    #[test]
    fn random_intercepts_only() {
        let s = parse_formula("y ~ Ap*As*Am + (1|PT) + (1|SM) + (1|PT:SM)", &m1()).unwrap();
        assert_eq!(s.random_terms.len(), 3);
        assert!(s.random_terms.iter().all(|t| t.is_intercept()));
        assert_eq!(s.fixed_terms.len(), 7);
        assert_eq!(s.random_terms[2].unit.tag, UnitKind::ParticipantStimulus);
    }

    #[test]
    fn intercept_only_fixed_part() {
        let s = parse_formula("y ~ 1 + (1|PT)", &m1()).unwrap();
        assert!(s.fixed_factors.is_empty());
        assert_eq!(s.random_terms.len(), 1);
    }

    #[test]
    fn participant_by_participant_factor_is_not_estimable() {
        let err = parse_formula("y ~ Ap*As*Am + (1|PT|Ap)", &m1()).unwrap_err();
        assert!(matches!(err, FormulaError::Estimability { .. }), "{err:?}");
    }

    #[test]
    fn constrained_star_expands_to_four_terms() {
        let s = parse_formula("y ~ Ap*As*Am + (1|PT|As*Am)", &m1()).unwrap();
        let labels: Vec<_> = s.random_terms.iter().map(|t| t.label()).collect();
        assert_eq!(labels, ["PT", "PT:As", "PT:Am", "PT:As:Am"]);
        assert!(s.random_terms.iter().all(|t| t.constrained()));
        let s = parse_formula("y ~ Ap*As*Am + (1|PT|As+Am)", &m1()).unwrap();
        assert_eq!(s.random_terms.len(), 3);
    }

    #[test]
    fn single_slope_term_is_unconstrained() {
        let s = parse_formula("y ~ Ap*As*Am + (1|PT:Am)", &m1()).unwrap();
        assert_eq!(s.random_terms.len(), 1);
        assert_eq!(s.random_terms[0].bar, BarKind::Single);
        assert_eq!(s.random_terms[0].factor_names(), ["Am"]);
    }

    #[test]
    fn pair_unit_spellings_agree() {
        let t = m1().with_pair_alias("PTSM");
        let a = parse_formula("y ~ Am + (1|PT:SM)", &t).unwrap();
        let b = parse_formula("y ~ Am + (1|SM:PT)", &t).unwrap();
        let c = parse_formula("y ~ Am + (1|PTSM)", &t).unwrap();
        assert_eq!(a.random_terms[0].unit.tag, UnitKind::ParticipantStimulus);
        assert_eq!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn correlated_and_independent_bars() {
        let s = parse_formula("y ~ Ap*As*Am + (As*Am|PT) + (1 + Ap||SM)", &m1()).unwrap();
        let bars: Vec<_> = s.random_terms.iter().map(|t| (t.label(), t.bar)).collect();
        assert_eq!(bars.len(), 6);
        assert_eq!(bars[0], ("PT".into(), BarKind::Correlated));
        assert_eq!(bars[5], ("SM:Ap".into(), BarKind::Independent));
    }

    #[test]
    fn errors_are_classified() {
        let t = m1();
        match parse_formula("y ~ Am + (1|PT", &t).unwrap_err() {
            FormulaError::Syntax { pos, .. } => assert_eq!(pos, 14),
            e => panic!("{e:?}"),
        }
        assert!(matches!(
            parse_formula("y ~ Am + Bq", &t).unwrap_err(),
            FormulaError::UnknownIdentifier(n) if n == "Bq"
        ));
        assert!(matches!(
            parse_formula("y ~ Am + (1|XX)", &t).unwrap_err(),
            FormulaError::UnknownIdentifier(_)
        ));
        assert!(matches!(
            parse_formula("y ~ Am + (1|PT) + (1|PT)", &t).unwrap_err(),
            FormulaError::DuplicateTerm(_)
        ));
        assert!(matches!(
            parse_formula("y ~ Am + (1|PT:As)", &t).unwrap_err(),
            FormulaError::RandomFactorNotFixed(_)
        ));
        assert!(matches!(
            parse_formula("y ~ Am + (1|PT:SM:Am)", &t).unwrap_err(),
            FormulaError::ConfoundedWithError(_)
        ));
        assert!(matches!(
            parse_formula("y ~ Am $ (1|PT)", &t).unwrap_err(),
            FormulaError::Syntax { pos: 7, .. }
        ));
    }

    #[test]
    fn render_round_trips() {
        let t = m1();
        for f in [
            "y ~ Ap*As*Am + (1|PT) + (1|SM) + (1|PT:SM)",
            "y ~ 1 + (1|PT)",
            "y ~ Ap*As*Am + (1|PT|As*Am) + (1|SM|Ap*Am) + (1|PT:SM)",
            "y ~ Ap*As*Am + (As*Am|PT) + (Ap*Am||SM)",
            "y ~ Am + Ap:Am + (1|PT:Am) + (1|PT)",
        ] {
            let s = parse_formula(f, &t).unwrap();
            let r = s.render();
            assert_eq!(parse_formula(&r, &t).unwrap(), s, "{f} -> {r}");
        }
    }

    #[test]
    fn factor_kinds_come_from_table() {
        let t = FactorTable::new("Subj", "Item")
            .with_factor(Factor::new("cond", FactorKind::M, 2).unwrap());
        let s = parse_formula("rt ~ cond + (1 + cond|Subj) + (1|Item:cond)", &t).unwrap();
        assert_eq!(s.random_terms.len(), 3);
        assert_eq!(s.random_terms[0].unit.id_column, "Subj");
    }
}
